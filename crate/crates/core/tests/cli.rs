use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use daae::losses::LOSS_CSV_HEADER;

fn daae(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daae"))
        .args(args)
        .env("DAAE_OUT_DIR", out_root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "train": { "epochs": 2, "batch_size": 8, "arch": { "base_filters": 4, "latent_dim": 8 } },
  "data": { "kind": "synthetic", "normal": "blobs", "anomaly": "stripes",
            "n_normal": 20, "n_anomaly": 6, "size": 16, "seed": 3 },
  "output_dir": "tiny"
}"#;

#[test]
fn eval_of_a_separable_fixture_reports_auc_one() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(
        &scores,
        "id,label,score\na,normal,0.1\nb,normal,0.2\nc,abnormal,0.8\nd,abnormal,0.9\n",
    )
    .unwrap();
    let o = daae(
        &["eval", "--scores", scores.to_str().unwrap(), "--bins", "4"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(stdout(&o).trim(), "AUC 1");
    let hist = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);
}

#[test]
fn zero_epochs_writes_an_untrained_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, TINY.replace(r#""epochs": 2"#, r#""epochs": 0"#)).unwrap();
    let o = daae(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let out = dir.path().join("tiny");
    assert_eq!(
        fs::read_to_string(out.join("losses.csv")).unwrap(),
        format!("{LOSS_CSV_HEADER}\n")
    );
    let ck = daae::checkpoint::load(out.join("checkpoint.daae")).unwrap();
    assert_eq!((ck.step, ck.epoch), (0, 0));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(daae(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(daae(&["frobnicate"], dir.path()).status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, TINY.replace(r#""epochs": 2"#, r#""epochs": 2, "epoch": 3"#)).unwrap();
    assert_eq!(
        daae(&["train", "--config", cfg.to_str().unwrap()], dir.path())
            .status
            .code(),
        Some(2)
    );

    fs::write(&cfg, TINY.replace(r#""batch_size": 8"#, r#""batch_size": 500"#)).unwrap();
    assert_eq!(
        daae(&["train", "--config", cfg.to_str().unwrap()], dir.path())
            .status
            .code(),
        Some(2)
    );

    let missing = dir.path().join("nope.json");
    assert_eq!(
        daae(&["train", "--config", missing.to_str().unwrap()], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        daae(&["gradcheck", "--instances", "1"], dir.path()).status.code(),
        Some(0)
    );
}

#[test]
fn train_score_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("tiny");

    assert_eq!(daae(&["train", "--config", cfg], dir.path()).status.code(), Some(0));
    for f in ["checkpoint.daae", "losses.csv", "run.json", "split.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2 * 2);

    let ck = out.join("checkpoint.daae");
    let o = daae(
        &[
            "score",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--data",
            cfg,
            "--out-dir",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 4 + 6);

    let o = daae(
        &[
            "eval",
            "--scores",
            out.join("scores.csv").to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let auc: f64 = stdout(&o).trim().strip_prefix("AUC ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(out.join("histogram.csv").exists());

    // A checkpoint only resumes under the config it was trained with.
    let longer = dir.path().join("longer.json");
    fs::write(&longer, TINY.replace(r#""epochs": 2"#, r#""epochs": 3"#)).unwrap();
    let o = daae(
        &[
            "train",
            "--config",
            longer.to_str().unwrap(),
            "--resume",
            ck.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "config mismatch must be refused");
}

#[test]
fn ablate_writes_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, TINY.replace(r#""epochs": 2"#, r#""epochs": 1"#)).unwrap();
    let o = daae(
        &[
            "ablate",
            "--config",
            cfg.to_str().unwrap(),
            "--arms",
            "irec+adv,irec+adv+dual",
            "--seeds",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = fs::read_to_string(dir.path().join("tiny/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 4);
    assert!(csv.contains("irec+adv+dual,stddev,"));
}

//! Command-line front end.
//!
//! Exit codes: `0` success, `1` runtime failure, `2` usage or configuration
//! error. Files are only written inside the chosen output directory.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{output_root, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    roc_auc, run_ablation_with, score_histogram, scores_from_csv, scores_to_csv, AblationArm, Experiment,
};
use crate::gradsuite::run_suite;
use crate::losses::{LossReport, LOSS_CSV_HEADER};
use crate::trainer::{self, Checkpoint, TrainObserver};

pub const CHECKPOINT_FILE: &str = "checkpoint.daae";
pub const LOSSES_FILE: &str = "losses.csv";
pub const RUN_FILE: &str = "run.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "daae", version, about = "Adversarial dual-autoencoder anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the normal class of a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from a saved checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the held-out split (or the whole dataset) of a run config.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config JSON describing data and split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the AUC of a scores CSV and write its histogram.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train every loss composition over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `table` or comma-separated term sets such as `irec+adv,irec+adv+dual`.
        #[arg(long, default_value = "table")]
        arms: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Test,
    All,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out_dir,
            resume,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let dir = out_dir.unwrap_or_else(|| cfg.resolved_output_dir());
            train(&cfg, &dir, resume.as_deref())
        }
        Command::Score {
            checkpoint,
            data,
            subset,
            out_dir,
        } => {
            let cfg = RunConfig::from_file(&data)?;
            let ck = checkpoint::load(&checkpoint)?;
            let dir = out_dir.unwrap_or_else(output_root);
            let n = score(&ck, &cfg, subset, &dir.join(SCORES_FILE))?;
            println!("scored {n} samples -> {}", dir.join(SCORES_FILE).display());
            Ok(())
        }
        Command::Eval { scores, bins, out_dir } => {
            let text = fs::read_to_string(&scores)?;
            let samples = scores_from_csv(&text)?;
            let auc = roc_auc(&samples)?;
            let hist = score_histogram(&samples, bins)?;
            let dir = out_dir.unwrap_or_else(output_root);
            ensure_dir(&dir)?;
            fs::write(dir.join(HISTOGRAM_FILE), hist.to_csv())?;
            println!("AUC {auc}");
            Ok(())
        }
        Command::Ablate {
            config,
            arms,
            seeds,
            out_dir,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let arms = AblationArm::parse_list(&arms)?;
            let dir = out_dir.unwrap_or_else(|| cfg.resolved_output_dir());
            ablate(&cfg, &arms, seeds, &dir)
        }
        Command::Gradcheck { instances, seed } => gradcheck(instances, seed),
    }
}

struct FileLogger {
    losses: BufWriter<File>,
    checkpoint: PathBuf,
    started: Instant,
}

impl TrainObserver for FileLogger {
    fn on_step(&mut self, step: u64, report: &LossReport) -> Result<()> {
        writeln!(self.losses, "{}", report.csv_row(step))?;
        Ok(())
    }

    fn on_epoch_end(&mut self, state: &Checkpoint) -> Result<()> {
        self.losses.flush()?;
        checkpoint::save(state, &self.checkpoint)?;
        eprintln!(
            "epoch {}/{}  step {}  {:.1}s",
            state.epoch,
            state.config.epochs,
            state.step,
            self.started.elapsed().as_secs_f64()
        );
        Ok(())
    }
}

/// Trains and writes checkpoint, loss CSV, canonical config and split into
/// `dir`. With `resume`, the loss CSV is appended to.
pub fn train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<()> {
    let prepared = cfg.prepare()?;
    let train_set = &prepared.experiment.train;
    cfg.train.validate_for(train_set.shape()[0])?;
    ensure_dir(dir)?;
    fs::write(dir.join(RUN_FILE), cfg.to_canonical_json()?)?;
    fs::write(dir.join(SPLIT_FILE), serde_json::to_string(&prepared.split)?)?;

    let mut state = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.config != cfg.train {
                return Err(Error::Config("checkpoint was trained with a different config".into()));
            }
            ck
        }
        None => Checkpoint::initialize(&cfg.train, train_set)?,
    };
    let losses_path = dir.join(LOSSES_FILE);
    let losses = if resume.is_some() && losses_path.exists() {
        fs::OpenOptions::new().append(true).open(&losses_path)?
    } else {
        let mut f = File::create(&losses_path)?;
        writeln!(f, "{LOSS_CSV_HEADER}")?;
        f
    };
    let mut logger = FileLogger {
        losses: BufWriter::new(losses),
        checkpoint: dir.join(CHECKPOINT_FILE),
        started: Instant::now(),
    };
    trainer::resume(&mut state, train_set, &mut logger)?;
    logger.losses.flush()?;
    checkpoint::save(&state, dir.join(CHECKPOINT_FILE))?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

/// Writes the scores CSV for `subset` of the config's data to `out` and
/// returns the number of scored samples.
pub fn score(ck: &Checkpoint, cfg: &RunConfig, subset: Subset, out: &Path) -> Result<usize> {
    let prepared = cfg.prepare()?;
    let exp = match subset {
        Subset::Test => prepared.experiment,
        Subset::All => {
            let ds = &prepared.dataset;
            let normal = cfg.normal_class()?;
            let (test_normal, test_abnormal) = (0..ds.len()).partition(|&i| ds.class_labels[i] == normal);
            let split = crate::data::OneVsRestSplit {
                train_normal: prepared.split.train_normal.clone(),
                test_normal,
                test_abnormal,
                ..prepared.split
            };
            Experiment::from_split(ds, &split)?
        }
    };
    let samples = exp.score(ck)?;
    if let Some(dir) = out.parent() {
        ensure_dir(dir)?;
    }
    fs::write(out, scores_to_csv(&samples))?;
    Ok(samples.len())
}

pub fn ablate(cfg: &RunConfig, arms: &[AblationArm], seeds: usize, dir: &Path) -> Result<()> {
    let prepared = cfg.prepare()?;
    ensure_dir(dir)?;
    let started = Instant::now();
    let report = run_ablation_with(
        &cfg.train,
        arms,
        &prepared.experiment,
        seeds,
        &mut |arm, seed, run| match run {
            Ok(r) => eprintln!(
                "{arm} seed {seed}: AUC {:.4}  ({:.0}s)",
                r.auc,
                started.elapsed().as_secs_f64()
            ),
            Err(e) => eprintln!("{arm} seed {seed}: failed: {e}"),
        },
    )?;
    fs::write(dir.join(ABLATION_FILE), report.to_csv())?;
    for s in &report.summaries {
        println!(
            "{:<28} mean {:.4}  stddev {:.4}  ({} failed)",
            s.arm, s.mean, s.stddev, s.failed
        );
    }
    Ok(())
}

pub fn gradcheck(instances: usize, seed: u64) -> Result<()> {
    let started = Instant::now();
    let results = run_suite(instances, seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} max rel err {:.3e}  (tol {:.0e}, {} instances, {} entries, {} kinks skipped)  {verdict}",
            r.name, r.max_relative_error, r.tolerance, r.instances, r.entries_checked, r.nonsmooth_skipped
        );
        failed += usize::from(!r.passed());
    }
    println!(
        "{} cases, {failed} failed, {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Domain(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

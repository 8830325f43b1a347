use daae::data::{make_synthetic, SyntheticKind};
use daae::evaluation::{anomaly_score, anomaly_scores, roc_auc, scores_from_csv, scores_to_csv, Label, ScoredSample};
use daae::networks::ArchSpec;
use daae::trainer::{Checkpoint, TrainConfig};
use proptest::prelude::*;

/// Quadratic pair count: wins plus half the ties over all (abnormal, normal) pairs.
fn pair_count_auc(samples: &[ScoredSample]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for a in samples.iter().filter(|s| s.label == Label::Abnormal) {
        for n in samples.iter().filter(|s| s.label == Label::Normal) {
            pairs += 1.0;
            credit += if a.score > n.score {
                1.0
            } else if a.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / pairs
}

/// Scores drawn from a handful of levels so ties are common; both labels present.
fn scored() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((any::<bool>(), 0u8..6), 2..50).prop_filter_map("both labels", |v| {
        let s: Vec<ScoredSample> = v
            .iter()
            .enumerate()
            .map(|(i, &(ab, lvl))| {
                let label = if ab { Label::Abnormal } else { Label::Normal };
                ScoredSample::new(i.to_string(), label, f64::from(lvl) * 0.25).unwrap()
            })
            .collect();
        let has = |l| s.iter().any(|x| x.label == l);
        (has(Label::Normal) && has(Label::Abnormal)).then_some(s)
    })
}

proptest! {
    #[test]
    fn auc_equals_pair_count(s in scored()) {
        prop_assert_eq!(roc_auc(&s).unwrap(), pair_count_auc(&s));
    }

    #[test]
    fn auc_is_invariant_under_increasing_maps(s in scored()) {
        let mapped: Vec<_> = s
            .iter()
            .map(|x| ScoredSample::new(x.id.clone(), x.label, (3.0 * x.score).exp() - 7.0).unwrap())
            .collect();
        prop_assert_eq!(roc_auc(&s).unwrap(), roc_auc(&mapped).unwrap());
    }

    #[test]
    fn swapping_labels_complements_auc(s in scored()) {
        let flipped: Vec<_> = s
            .iter()
            .map(|x| ScoredSample::new(x.id.clone(), x.label.flipped(), x.score).unwrap())
            .collect();
        let sum = roc_auc(&s).unwrap() + roc_auc(&flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_csv_round_trips(s in scored()) {
        prop_assert_eq!(scores_from_csv(&scores_to_csv(&s)).unwrap(), s);
    }
}

#[test]
fn hand_derived_fixture() {
    let s = |l, v| ScoredSample::new("", l, v).unwrap();
    let samples = [
        s(Label::Normal, 0.1),
        s(Label::Normal, 0.2),
        s(Label::Normal, 0.3),
        s(Label::Normal, 0.7),
        s(Label::Abnormal, 0.4),
        s(Label::Abnormal, 0.8),
    ];
    assert_eq!(roc_auc(&samples).unwrap(), 0.875);
}

#[test]
fn scores_do_not_depend_on_order_or_batch_packing() {
    let arch = ArchSpec {
        base_filters: 4,
        latent_dim: 8,
        ..ArchSpec::default()
    };
    let config = TrainConfig {
        arch,
        ..TrainConfig::default()
    };
    let data = make_synthetic(SyntheticKind::Stripes, 150, 16, 2).unwrap();
    let ck = Checkpoint::initialize(&config, &data.images).unwrap();

    let all = anomaly_scores(&ck, &data.images).unwrap();
    let reversed: Vec<usize> = (0..150).rev().collect();
    let rev = anomaly_scores(&ck, &data.images.select_rows(&reversed).unwrap()).unwrap();
    for (i, &r) in reversed.iter().enumerate() {
        assert_eq!(rev[i], all[r]);
    }
    for i in [0, 77, 149] {
        let one = data.images.select_rows(&[i]).unwrap();
        assert_eq!(anomaly_score(&ck, &one).unwrap(), all[i]);
    }
}

//! Anomaly scores, ROC-AUC, score histograms and the loss-composition
//! ablation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OneVsRestSplit};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::reconstruct;
use crate::tensor::Tensor;
use crate::trainer::{fit, Checkpoint, Recorder, TrainConfig};

const SCORE_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Abnormal,
            Label::Abnormal => Label::Normal,
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            _ => Err(Error::Format(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, label: Label, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite("anomaly score".into()));
        }
        Ok(ScoredSample {
            id: id.into(),
            label,
            score,
        })
    }
}

/// Per-sample mean `|x − D′(G(x))|` for every image of `images`.
///
/// Samples are processed in fixed-size chunks; each score depends only on
/// its own image.
pub fn anomaly_scores(ck: &Checkpoint, images: &Tensor) -> Result<Vec<f64>> {
    let arch = ck.config.arch;
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != arch.image_shape(1)[1..] {
        return Err(Error::dim("anomaly_score", shape, &arch.image_shape(1)));
    }
    let pixels = arch.pixels();
    let mut scores = Vec::with_capacity(shape[0]);
    let indices: Vec<usize> = (0..shape[0]).collect();
    for chunk in indices.chunks(SCORE_BATCH) {
        let x = images.select_rows(chunk)?;
        let gx = reconstruct(&ck.generator, &x)?;
        let dgx = reconstruct(&ck.auxiliary, &gx)?;
        for (xs, ys) in x.values().chunks(pixels).zip(dgx.values().chunks(pixels)) {
            scores.push(xs.iter().zip(ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / pixels as f64);
        }
    }
    Ok(scores)
}

/// Score of a single `[1, C, H, W]` image.
pub fn anomaly_score(ck: &Checkpoint, x: &Tensor) -> Result<f64> {
    if x.shape().first() != Some(&1) {
        return Err(Error::dim("anomaly_score", x.shape(), &ck.config.arch.image_shape(1)));
    }
    Ok(anomaly_scores(ck, x)?[0])
}

/// Mann–Whitney AUC with half credit for ties.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    let mut sorted: Vec<(f64, Label)> = samples.iter().map(|s| (s.score, s.label)).collect();
    if let Some((s, _)) = sorted.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {s}")));
    }
    let n_abn = sorted.iter().filter(|(_, l)| *l == Label::Abnormal).count();
    let n_norm = sorted.len() - n_abn;
    if n_abn == 0 || n_norm == 0 {
        return Err(Error::Domain(format!(
            "AUC needs both classes, got {n_norm} normal and {n_abn} abnormal"
        )));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Walk groups of equal score; count normals strictly below.
    let (mut wins, mut ties) = (0u64, 0u64);
    let mut normals_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut a, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            match sorted[j].1 {
                Label::Abnormal => a += 1,
                Label::Normal => n += 1,
            }
            j += 1;
        }
        wins += a * normals_below;
        ties += a * n;
        normals_below += n;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (n_abn as f64 * n_norm as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

pub const HISTOGRAM_CSV_HEADER: &str = "bin_low,bin_high,count_normal,count_abnormal";

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.normal.len()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.high - self.low) / self.n_bins() as f64;
        let hi = if bin + 1 == self.n_bins() {
            self.high
        } else {
            self.low + w * (bin + 1) as f64
        };
        (self.low + w * bin as f64, hi)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTOGRAM_CSV_HEADER}\n");
        for b in 0..self.n_bins() {
            let (lo, hi) = self.edges(b);
            out.push_str(&format!("{lo},{hi},{},{}\n", self.normal[b], self.abnormal[b]));
        }
        out
    }
}

/// Bins both classes over the shared `[min, max]` score range. The last bin
/// is closed on the right.
pub fn score_histogram(samples: &[ScoredSample], n_bins: usize) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Domain("histogram of no samples".into()));
    }
    if n_bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    let low = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let high = samples.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    if !(low.is_finite() && high.is_finite()) {
        return Err(Error::Domain("non-finite score in histogram".into()));
    }
    let mut h = Histogram {
        low,
        high,
        normal: vec![0; n_bins],
        abnormal: vec![0; n_bins],
    };
    let span = high - low;
    for s in samples {
        let bin = if span > 0.0 {
            (((s.score - low) / span * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            0
        };
        match s.label {
            Label::Normal => h.normal[bin] += 1,
            Label::Abnormal => h.abnormal[bin] += 1,
        }
    }
    Ok(h)
}

pub const SCORES_CSV_HEADER: &str = "id,label,score";

pub fn scores_to_csv(samples: &[ScoredSample]) -> String {
    let mut out = format!("{SCORES_CSV_HEADER}\n");
    for s in samples {
        out.push_str(&format!("{},{},{}\n", s.id, s.label.as_str(), s.score));
    }
    out
}

pub fn scores_from_csv(text: &str) -> Result<Vec<ScoredSample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == SCORES_CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "scores CSV must start with {SCORES_CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let [id, label, score] = fields[..] else {
                return Err(Error::Format(format!(
                    "line {}: expected 3 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            };
            let score: f64 = score
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad score {score:?}", i + 2)))?;
            ScoredSample::new(id, label.parse()?, score)
        })
        .collect()
}

/// Held-out data of one one-vs-rest experiment, ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub train: Tensor,
    pub test: Tensor,
    pub test_labels: Vec<Label>,
    pub test_ids: Vec<String>,
}

impl Experiment {
    pub fn from_split(ds: &Dataset, split: &OneVsRestSplit) -> Result<Self> {
        if split.train_normal.is_empty() {
            return Err(Error::Config("split has no training samples".into()));
        }
        let test_idx: Vec<usize> = split.test_normal.iter().chain(&split.test_abnormal).copied().collect();
        if test_idx.is_empty() {
            return Err(Error::Config("split has no test samples".into()));
        }
        let test_labels = std::iter::repeat(Label::Normal)
            .take(split.test_normal.len())
            .chain(std::iter::repeat(Label::Abnormal).take(split.test_abnormal.len()))
            .collect();
        Ok(Experiment {
            train: ds.images.select_rows(&split.train_normal)?,
            test: ds.images.select_rows(&test_idx)?,
            test_labels,
            test_ids: test_idx.iter().map(|i| i.to_string()).collect(),
        })
    }

    pub fn score(&self, ck: &Checkpoint) -> Result<Vec<ScoredSample>> {
        let scores = anomaly_scores(ck, &self.test)?;
        self.test_ids
            .iter()
            .zip(&self.test_labels)
            .zip(scores)
            .map(|((id, &label), s)| ScoredSample::new(id.clone(), label, s))
            .collect()
    }
}

// ---- ablation ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Irec,
    Adv,
    Zrec,
    Center,
    Dual,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Irec, Term::Adv, Term::Zrec, Term::Center, Term::Dual];

    pub fn name(self) -> &'static str {
        match self {
            Term::Irec => "irec",
            Term::Adv => "adv",
            Term::Zrec => "zrec",
            Term::Center => "center",
            Term::Dual => "dual",
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term {s:?}")))
    }
}

/// A loss composition; disabled terms get weight zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationArm {
    pub name: String,
    pub enabled_terms: BTreeSet<Term>,
}

impl AblationArm {
    pub fn new(terms: impl IntoIterator<Item = Term>) -> Result<Self> {
        let enabled_terms: BTreeSet<Term> = terms.into_iter().collect();
        if !enabled_terms.contains(&Term::Irec) || !enabled_terms.contains(&Term::Adv) {
            return Err(Error::Config("every arm must enable irec and adv".into()));
        }
        let name = enabled_terms.iter().map(|t| t.name()).collect::<Vec<_>>().join("+");
        Ok(AblationArm { name, enabled_terms })
    }

    /// The four rows of the loss-composition table, smallest first.
    pub fn table() -> Vec<AblationArm> {
        use Term::*;
        [
            vec![Irec, Adv],
            vec![Irec, Adv, Zrec],
            vec![Irec, Adv, Zrec, Center],
            Term::ALL.to_vec(),
        ]
        .into_iter()
        .map(|t| AblationArm::new(t).expect("irec and adv present"))
        .collect()
    }

    /// Parses `table` or a comma-separated list of `+`-joined term sets.
    pub fn parse_list(spec: &str) -> Result<Vec<AblationArm>> {
        if spec.trim() == "table" {
            return Ok(AblationArm::table());
        }
        let arms = spec
            .split(',')
            .map(|arm| {
                let terms = arm
                    .trim()
                    .split('+')
                    .map(|t| t.trim().parse())
                    .collect::<Result<Vec<Term>>>()?;
                AblationArm::new(terms)
            })
            .collect::<Result<Vec<_>>>()?;
        if arms.is_empty() {
            return Err(Error::Config("no ablation arms given".into()));
        }
        Ok(arms)
    }

    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        let on = |t| self.enabled_terms.contains(&t);
        LossWeights {
            w_i: if on(Term::Irec) { base.w_i } else { 0.0 },
            w_a: if on(Term::Adv) { base.w_a } else { 0.0 },
            w_z: if on(Term::Zrec) { base.w_z } else { 0.0 },
            w_c: if on(Term::Center) { base.w_c } else { 0.0 },
            w_d: if on(Term::Dual) { base.w_d } else { 0.0 },
            k: base.k,
        }
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Everything produced by one (arm, seed) training run.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub checkpoint: Checkpoint,
    pub losses: Recorder,
    pub scores: Vec<ScoredSample>,
    pub auc: f64,
}

/// Trains `arm` with `seed` on the experiment and scores its test split.
pub fn run_arm(base: &TrainConfig, arm: &AblationArm, exp: &Experiment, seed: u64) -> Result<ArmRun> {
    let config = TrainConfig {
        weights: arm.weights(&base.weights),
        seed,
        ..*base
    };
    let mut losses = Recorder::default();
    let checkpoint = fit(&config, &exp.train, &mut losses)?;
    let scores = exp.score(&checkpoint)?;
    let auc = roc_auc(&scores)?;
    Ok(ArmRun {
        checkpoint,
        losses,
        scores,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub auc: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub stddev: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<ArmSummary>,
}

pub const ABLATION_CSV_HEADER: &str = "arm,seed,auc";

impl AblationReport {
    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    /// Per-run rows, then one `mean` and one `stddev` row per arm. Failed
    /// runs have an empty AUC field.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            match &r.auc {
                Ok(a) => out.push_str(&format!("{},{},{a}\n", r.arm, r.seed)),
                Err(_) => out.push_str(&format!("{},{},\n", r.arm, r.seed)),
            }
        }
        for s in &self.summaries {
            out.push_str(&format!("{},mean,{}\n{},stddev,{}\n", s.arm, s.mean, s.arm, s.stddev));
        }
        out
    }
}

fn summarize(arm: &str, rows: &[AblationRow]) -> ArmSummary {
    let aucs: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm)
        .filter_map(|r| r.auc.clone().ok())
        .collect();
    let failed = rows.iter().filter(|r| r.arm == arm && r.auc.is_err()).count();
    let n = aucs.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / n as f64
    };
    let stddev = if n < 2 {
        0.0
    } else {
        (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    ArmSummary {
        arm: arm.to_string(),
        mean,
        stddev,
        completed: n,
        failed,
    }
}

/// Trains every arm with seeds `base.seed .. base.seed + n_seeds`.
/// `on_run` sees each finished run; a failing run is recorded and the
/// remaining runs continue.
pub fn run_ablation_with(
    base: &TrainConfig,
    arms: &[AblationArm],
    exp: &Experiment,
    n_seeds: usize,
    on_run: &mut dyn FnMut(&AblationArm, u64, &Result<ArmRun>),
) -> Result<AblationReport> {
    if arms.is_empty() {
        return Err(Error::Config("no ablation arms given".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    base.validate_for(exp.train.shape()[0])?;
    let mut rows = Vec::new();
    for arm in arms {
        for i in 0..n_seeds as u64 {
            let seed = base.seed.wrapping_add(i);
            let run = run_arm(base, arm, exp, seed);
            on_run(arm, seed, &run);
            rows.push(AblationRow {
                arm: arm.name.clone(),
                seed,
                auc: run.map(|r| r.auc).map_err(|e| e.to_string()),
            });
        }
    }
    let summaries = arms.iter().map(|a| summarize(&a.name, &rows)).collect();
    Ok(AblationReport { rows, summaries })
}

pub fn run_ablation(
    base: &TrainConfig,
    arms: &[AblationArm],
    exp: &Experiment,
    n_seeds: usize,
) -> Result<AblationReport> {
    run_ablation_with(base, arms, exp, n_seeds, &mut |_, _, _| {})
}

/// Linear-interpolated quantile of `values` (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

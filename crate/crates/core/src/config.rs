//! Run configuration: training hyperparameters, data source, split and
//! output location in one JSON document.
//!
//! ```json
//! {
//!   "train": { "epochs": 20, "seed": 3, "arch": { "base_filters": 8 } },
//!   "data": { "kind": "synthetic", "normal": "blobs", "anomaly": "stripes",
//!             "n_normal": 1250, "n_anomaly": 250, "size": 16, "seed": 7 },
//!   "split": { "train_fraction": 0.8, "seed": 0 },
//!   "output_dir": "blobs-run"
//! }
//! ```
//!
//! Every object rejects unknown keys; omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::canonical_json;
use crate::data::{load_idx, make_synthetic, split_one_vs_rest, Dataset, OneVsRestSplit, SyntheticKind};
use crate::error::{Error, Result};
use crate::evaluation::Experiment;
use crate::trainer::TrainConfig;

/// Environment variable naming the root for relative output directories.
pub const OUT_DIR_ENV: &str = "DAAE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "daae-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        normal: SyntheticKind,
        anomaly: SyntheticKind,
        n_normal: usize,
        n_anomaly: usize,
        size: usize,
        seed: u64,
    },
    /// IDX image/label pair (optionally gzipped); 28×28 digits are resized
    /// to `size`.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_size")]
        size: usize,
    },
}

fn default_size() -> usize {
    16
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                normal,
                anomaly,
                n_normal,
                n_anomaly,
                size,
                seed,
            } => {
                if normal == anomaly {
                    return Err(Error::Config("normal and anomaly kinds must differ".into()));
                }
                let a = make_synthetic(*normal, *n_normal, *size, *seed)?;
                let b = make_synthetic(*anomaly, *n_anomaly, *size, *seed)?;
                a.concat(&b)
            }
            DataSource::Idx { images, labels, size } => load_idx(images, labels)?.resize_digits(*size),
        }
    }

    fn default_normal_class(&self) -> Option<u32> {
        match self {
            DataSource::Synthetic { normal, .. } => Some(normal.class_label()),
            DataSource::Idx { .. } => None,
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let DataSource::Idx { images, labels, .. } = self {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Required for IDX data; synthetic data defaults to its normal kind.
    pub normal_class: Option<u32>,
    pub train_fraction: f64,
    pub seed: u64,
    pub max_train: Option<usize>,
    pub max_test_abnormal: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            normal_class: None,
            train_fraction: 0.8,
            seed: 0,
            max_train: None,
            max_test_abnormal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Dataset, split and scoring view of one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: OneVsRestSplit,
    pub experiment: Experiment,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative data paths are taken relative to it.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let (DataSource::Synthetic { size, .. } | DataSource::Idx { size, .. }) = &self.data;
        if *size != self.train.arch.image_size {
            return Err(Error::Config(format!(
                "data size {size} differs from arch.image_size {}",
                self.train.arch.image_size
            )));
        }
        if self.split.normal_class.is_none() && self.data.default_normal_class().is_none() {
            return Err(Error::Config("split.normal_class is required for IDX data".into()));
        }
        Ok(())
    }

    pub fn normal_class(&self) -> Result<u32> {
        self.split
            .normal_class
            .or_else(|| self.data.default_normal_class())
            .ok_or_else(|| Error::Config("split.normal_class is required for IDX data".into()))
    }

    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let dataset = self.data.load()?;
        let split = split_one_vs_rest(
            &dataset,
            self.normal_class()?,
            self.split.train_fraction,
            self.split.seed,
        )?
        .truncated(self.split.max_train, self.split.max_test_abnormal);
        let experiment = Experiment::from_split(&dataset, &split)?;
        Ok(Prepared {
            dataset,
            split,
            experiment,
        })
    }

    /// `output_dir` resolved against `$DAAE_OUT_DIR` (or `daae-out`) when
    /// relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output_dir(self.output_dir.as_deref())
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

pub fn resolve_output_dir(dir: Option<&Path>) -> PathBuf {
    match dir {
        Some(d) if d.is_absolute() => d.to_path_buf(),
        Some(d) => output_root().join(d),
        None => output_root(),
    }
}

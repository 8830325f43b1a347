//! Datasets: IDX files, synthetic images, and one-vs-rest splits.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images normalized to `[-1, 1]` with one integer class per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub class_labels: Vec<u32>,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor, class_labels: Vec<u32>, source: impl Into<String>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::dim("dataset images", shape, &[0, 0, 0, 0]));
        }
        if shape[0] != class_labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                shape[0],
                class_labels.len()
            )));
        }
        if let Some(v) = images.values().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Dataset {
            images,
            class_labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Appends `other` (same image geometry) after `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.images.shape()[1..] != other.images.shape()[1..] {
            return Err(Error::dim("concat", self.images.shape(), other.images.shape()));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let values = [self.images.values(), other.images.values()].concat();
        let labels = [self.class_labels.as_slice(), other.class_labels.as_slice()].concat();
        Dataset::new(
            Tensor::new(shape, values)?,
            labels,
            format!("{}+{}", self.source, other.source),
        )
    }

    /// Pads every image symmetrically to `size`×`size` with the background
    /// value -1.
    pub fn pad_to(&self, size: usize) -> Result<Dataset> {
        let s = self.images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if size < h || size < w || (size - h) % 2 != 0 || (size - w) % 2 != 0 {
            return Err(Error::Config(format!("cannot pad {h}x{w} symmetrically to {size}")));
        }
        let (py, px) = ((size - h) / 2, (size - w) / 2);
        let mut out = vec![-1.0; n * c * size * size];
        for plane in 0..n * c {
            let src = &self.images.values()[plane * h * w..][..h * w];
            let dst = &mut out[plane * size * size..][..size * size];
            for y in 0..h {
                dst[(y + py) * size + px..][..w].copy_from_slice(&src[y * w..][..w]);
            }
        }
        Dataset::new(
            Tensor::new(vec![n, c, size, size], out)?,
            self.class_labels.clone(),
            self.source.clone(),
        )
    }

    /// Averages non-overlapping `factor`×`factor` blocks.
    pub fn mean_pool(&self, factor: usize) -> Result<Dataset> {
        let s = self.images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!("cannot pool {h}x{w} by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = (factor * factor) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &self.images.values()[plane * h * w..][..h * w];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / factor) * ow + x / factor] += src[y * w + x];
                }
            }
            dst.iter_mut().for_each(|v| *v /= norm);
        }
        Dataset::new(
            Tensor::new(vec![n, c, oh, ow], out)?,
            self.class_labels.clone(),
            self.source.clone(),
        )
    }

    /// Brings 28×28 digits to `size`: 28 stays, 32 pads, 16 pads to 32 and
    /// then 2×2 mean-pools.
    pub fn resize_digits(&self, size: usize) -> Result<Dataset> {
        match (self.image_size(), size) {
            (a, b) if a == b => Ok(self.clone()),
            (28, 32) => self.pad_to(32),
            (28, 16) => self.pad_to(32)?.mean_pool(2),
            (a, b) => Err(Error::Config(format!("no resize path from {a} to {b}"))),
        }
    }
}

pub fn byte_to_unit(p: u8) -> f64 {
    2.0 * (f64::from(p) / 255.0) - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            Error::Format(format!(
                "{what}: header truncated, expected at least {} bytes, got {}",
                at + 4,
                bytes.len()
            ))
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: wrong magic {:02x?} (expected {:08x})",
            &bytes[..4],
            expected
        )));
    }
    Ok(())
}

/// Parses an IDX3 image file into `[N, 1, rows, cols]` values in `[-1, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "idx images")?;
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "idx images: expected {expected} bytes for {n}x{rows}x{cols}, got {}",
            bytes.len()
        )));
    }
    Tensor::new(
        vec![n, 1, rows, cols],
        bytes[16..].iter().map(|&p| byte_to_unit(p)).collect(),
    )
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "idx labels")?;
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "idx labels: expected {} bytes for {n} labels, got {}",
            8 + n,
            bytes.len()
        )));
    }
    Ok(bytes[8..].iter().map(|&b| u32::from(b)).collect())
}

/// Loads an IDX image/label pair; gzip-compressed files are accepted.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    Dataset::new(images, labels, format!("idx:{}", images_path.display()))
}

/// Encodes a single-channel dataset as IDX image and label bytes, mapping
/// each value back to the nearest byte.
pub fn to_idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(Error::Format(format!("IDX images need one channel, got {}", s[1])));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.values().iter().map(|&v| unit_to_byte(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.class_labels {
        labels.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte")))?);
    }
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = to_idx_bytes(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

// ---- synthetic ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// One Gaussian bright spot at a random position.
    Blobs,
    /// Periodic bars at a random angle, period and phase, seen through a
    /// wider Gaussian window at a random position.
    Stripes,
}

impl SyntheticKind {
    pub fn class_label(self) -> u32 {
        match self {
            SyntheticKind::Blobs => 0,
            SyntheticKind::Stripes => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Stripes => "stripes",
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "stripes" => Ok(SyntheticKind::Stripes),
            _ => Err(Error::Config(format!("unknown synthetic kind {s:?}"))),
        }
    }
}

/// Pixel noise added to every synthetic image before clamping.
pub const SYNTHETIC_NOISE: f64 = 0.05;

fn render(kind: SyntheticKind, size: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let s = size as f64;
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive std");
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let sigma = rng.random_range(0.1 * s..0.18 * s);
    let amp = rng.random_range(0.8..1.0);
    // Stripes share the blob's envelope, so the classes differ in texture
    // rather than in overall brightness or position.
    let wave: Box<dyn Fn(f64, f64) -> f64> = match kind {
        SyntheticKind::Blobs => Box::new(|_, _| 1.0),
        SyntheticKind::Stripes => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(0.25 * s..0.4 * s);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, sn) = (theta.cos(), theta.sin());
            Box::new(move |x, y| 0.5 + 0.5 * (std::f64::consts::TAU * (x * c + y * sn) / period + phase).sin())
        }
    };
    let sigma = match kind {
        SyntheticKind::Blobs => sigma,
        SyntheticKind::Stripes => sigma * 2.0,
    };
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            out[y * size + x] = 2.0 * amp * env * wave(px, py) - 1.0;
        }
    }
    for v in out.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
    }
}

/// `n` seeded single-channel `size`×`size` images of one kind.
pub fn make_synthetic(kind: SyntheticKind, n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    if size < 8 {
        return Err(Error::Config(format!("synthetic image size must be >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(kind.class_label()) << 32));
    let plane = size * size;
    let mut values = vec![0.0; n * plane];
    for img in values.chunks_mut(plane) {
        render(kind, size, &mut rng, img);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, size, size], values)?,
        vec![kind.class_label(); n],
        format!("synthetic:{}:{seed}", kind.name()),
    )
}

// ---- one-vs-rest -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneVsRestSplit {
    pub normal_class: u32,
    pub train_normal: Vec<usize>,
    pub test_normal: Vec<usize>,
    pub test_abnormal: Vec<usize>,
    pub seed: u64,
}

/// Shuffles the normal-class indices with `seed` and puts `train_fraction` of
/// them into training; the rest of the normal class and every other index
/// are test data.
pub fn split_one_vs_rest(ds: &Dataset, normal_class: u32, train_fraction: f64, seed: u64) -> Result<OneVsRestSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut normal: Vec<usize> = (0..ds.len()).filter(|&i| ds.class_labels[i] == normal_class).collect();
    if normal.is_empty() {
        return Err(Error::Config(format!(
            "class {normal_class} does not occur in {}",
            ds.source
        )));
    }
    let test_abnormal = (0..ds.len()).filter(|&i| ds.class_labels[i] != normal_class).collect();
    normal.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((normal.len() as f64 * train_fraction).round() as usize).clamp(1, normal.len());
    let test_normal = normal.split_off(n_train);
    Ok(OneVsRestSplit {
        normal_class,
        train_normal: normal,
        test_normal,
        test_abnormal,
        seed,
    })
}

impl OneVsRestSplit {
    /// Keeps at most `max_train` training and `max_abnormal` anomalous test
    /// indices (both lists are already in seeded or dataset order).
    pub fn truncated(mut self, max_train: Option<usize>, max_abnormal: Option<usize>) -> Self {
        if let Some(m) = max_train {
            self.train_normal.truncate(m);
        }
        if let Some(m) = max_abnormal {
            self.test_abnormal.truncate(m);
        }
        self
    }
}

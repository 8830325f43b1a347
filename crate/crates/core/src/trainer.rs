//! Center initialization and the three-player alternating schedule.
//!
//! Each batch performs, in order:
//!
//! 1. a discriminator step on `adv_loss_d(D(x), D(G(x)))` with `G` frozen;
//! 2. an auxiliary-autoencoder step on `girec − k·direc` with `G` frozen;
//! 3. a generator step on
//!    `w_i·irec + w_a·adv_g + w_z·zrec + w_c·center + w_d·direc` with `D` and
//!    `D′` frozen.
//!
//! The latent center is computed once from the untrained generator encoder
//! and never changes afterwards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, GeneratorTerms, LossReport, LossWeights};
use crate::networks::{self, init_network, ArchSpec, NetworkKind, NetworkParams};
use crate::optim::{AdamSettings, AdamState, ADAM_EPS};
use crate::tensor::Tensor;

/// Coordinates of the center closer to zero than this are pushed out to it.
pub const CENTER_GUARD: f64 = 0.01;
const CENTER_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub arch: ArchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            arch: ArchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.arch.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, train_len: usize) -> Result<()> {
        self.validate()?;
        if self.batch_size > train_len {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {train_len} training samples",
                self.batch_size
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: ADAM_EPS,
        }
    }

    /// Independent seeds for the three networks and the shuffler.
    pub fn stream_seed(&self, stream: u64) -> u64 {
        splitmix64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed latent center `c` with the statistics of the pass that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCenter {
    pub c: Vec<f64>,
    pub n_samples_used: usize,
    /// Mean Euclidean distance of the initial latents to `c`.
    pub mean_radius_at_init: f64,
}

impl LatentCenter {
    /// Center of the rows of `latents` (`[N, d]`), with the near-zero guard.
    pub fn from_latents(latents: &Tensor) -> Result<Self> {
        let shape = latents.shape();
        if shape.len() != 2 {
            return Err(Error::dim("center", shape, &[0, 0]));
        }
        let (n, d) = (shape[0], shape[1]);
        let mut sum = vec![0.0; d];
        for row in latents.values().chunks(d) {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        let c: Vec<f64> = sum.iter().map(|s| guard(s / n as f64)).collect();
        let radius = latents
            .values()
            .chunks(d)
            .map(|row| row.iter().zip(&c).map(|(v, ci)| (v - ci).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64;
        Ok(LatentCenter {
            c,
            n_samples_used: n,
            mean_radius_at_init: radius,
        })
    }
}

fn guard(v: f64) -> f64 {
    if v.abs() >= CENTER_GUARD {
        v
    } else if v < 0.0 {
        -CENTER_GUARD
    } else {
        CENTER_GUARD
    }
}

/// Latent codes of every image under `params`' encoder, in chunks.
pub fn encode_all(params: &NetworkParams, images: &Tensor) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut values = Vec::with_capacity(n * params.arch.latent_dim);
    let mut start = 0;
    while start < n {
        let end = (start + CENTER_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let z = networks::encode(params, &images.select_rows(&idx)?)?;
        values.extend_from_slice(z.values());
        start = end;
    }
    Tensor::new(vec![n, params.arch.latent_dim], values)
}

/// Rows `indices` of `images` as a training set; empty selections are a
/// configuration error.
pub fn gather(images: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    images.select_rows(indices)
}

/// Mean latent of the whole training set under the (untrained) generator.
pub fn compute_center(generator: &NetworkParams, training_set: &Tensor) -> Result<LatentCenter> {
    LatentCenter::from_latents(&encode_all(generator, training_set)?)
}

/// Complete training state; everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub center: LatentCenter,
    pub generator: NetworkParams,
    pub discriminator: NetworkParams,
    pub auxiliary: NetworkParams,
    pub opt_generator: AdamState,
    pub opt_discriminator: AdamState,
    pub opt_auxiliary: AdamState,
    /// Batches completed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
}

impl Checkpoint {
    /// Fresh networks from the config seed plus the center over `training_set`.
    pub fn initialize(config: &TrainConfig, training_set: &Tensor) -> Result<Self> {
        config.validate()?;
        let generator = init_network(&config.arch, NetworkKind::Generator, config.stream_seed(1))?;
        let discriminator = init_network(&config.arch, NetworkKind::Discriminator, config.stream_seed(2))?;
        let auxiliary = init_network(&config.arch, NetworkKind::Auxiliary, config.stream_seed(3))?;
        let center = compute_center(&generator, training_set)?;
        Ok(Checkpoint {
            config: *config,
            center,
            opt_generator: AdamState::for_params(&generator),
            opt_discriminator: AdamState::for_params(&discriminator),
            opt_auxiliary: AdamState::for_params(&auxiliary),
            generator,
            discriminator,
            auxiliary,
            step: 0,
            epoch: 0,
        })
    }
}

fn tag<T>(r: Result<T>, term: &str, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{term} at step {step}: {what}")),
        other => other,
    })
}

/// The generator's weighted objective for images `x`; `nets` are the bound
/// G, D and D′ parameters.
pub(crate) fn generator_objective(
    g: &mut Graph,
    arch: &ArchSpec,
    center: &LatentCenter,
    w: &LossWeights,
    nets: [&networks::Bound; 3],
    x: crate::graph::Var,
    step: u64,
) -> Result<(GeneratorTerms, crate::graph::Var)> {
    let [gp, dp, ap] = nets;
    let (z, gx) = networks::autoencode_on(g, arch, gp, x)?;
    let d_fake = networks::discriminate_on(g, arch, dp, gx)?;
    let (z_prime, dgx) = networks::autoencode_on(g, arch, ap, gx)?;
    let terms = GeneratorTerms {
        irec: tag(losses::irec_loss(g, x, gx), "irec", step)?,
        adv_g: tag(losses::adv_loss_g(g, d_fake), "adv_g", step)?,
        zrec: tag(losses::zrec_loss(g, z, z_prime), "zrec", step)?,
        center: tag(losses::center_loss(g, z, center), "center", step)?,
        direc: tag(losses::l1_mean(g, gx, dgx), "direc", step)?,
    };
    let total = tag(losses::total_generator_loss(g, &terms, w), "total", step)?;
    Ok((terms, total))
}

/// One D → D′ → G update on `batch`; returns the step's loss report.
pub fn train_step(state: &mut Checkpoint, batch: &Tensor) -> Result<LossReport> {
    let arch = state.config.arch;
    let w = state.config.weights;
    let adam = state.config.adam();
    let step = state.step + 1;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != arch.image_shape(1)[1..] {
        return Err(Error::dim("train_step batch", shape, &arch.image_shape(1)));
    }
    let mut report = LossReport::default();

    // (1) discriminator
    let gx_tensor = {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let gp = state.generator.bind(&mut g, false);
        let (_, gx) = networks::autoencode_on(&mut g, &arch, &gp, x)?;
        let dp = state.discriminator.bind(&mut g, true);
        let d_real = networks::discriminate_on(&mut g, &arch, &dp, x)?;
        let d_fake = networks::discriminate_on(&mut g, &arch, &dp, gx)?;
        let loss = tag(losses::adv_loss_d(&mut g, d_real, d_fake), "adv_d", step)?;
        report.adv_d = g.item(loss)?;
        tag(g.backward(loss), "adv_d", step)?;
        state.discriminator.zero_grad();
        state.discriminator.accumulate_from(&g, &dp)?;
        tag(
            state.opt_discriminator.step(&mut state.discriminator, &adam),
            "adv_d",
            step,
        )?;
        state.discriminator.clear_grad();
        g.tensor(gx)
    };

    // (2) auxiliary autoencoder
    {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let gx = g.constant(&gx_tensor);
        let ap = state.auxiliary.bind(&mut g, true);
        let (_, dx) = networks::autoencode_on(&mut g, &arch, &ap, x)?;
        let (_, dgx) = networks::autoencode_on(&mut g, &arch, &ap, gx)?;
        let terms = tag(losses::dual_loss(&mut g, x, gx, dx, dgx, w.k), "dual", step)?;
        report.girec = g.item(terms.girec)?;
        report.direc = g.item(terms.direc)?;
        report.dual = g.item(terms.dual)?;
        tag(g.backward(terms.dual), "dual", step)?;
        state.auxiliary.zero_grad();
        state.auxiliary.accumulate_from(&g, &ap)?;
        tag(state.opt_auxiliary.step(&mut state.auxiliary, &adam), "dual", step)?;
        state.auxiliary.clear_grad();
    }

    // (3) generator
    {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let gp = state.generator.bind(&mut g, true);
        let dp = state.discriminator.bind(&mut g, false);
        let ap = state.auxiliary.bind(&mut g, false);
        let (terms, total) = generator_objective(&mut g, &arch, &state.center, &w, [&gp, &dp, &ap], x, step)?;
        report.irec = g.item(terms.irec)?;
        report.adv_g = g.item(terms.adv_g)?;
        report.zrec = g.item(terms.zrec)?;
        report.center = g.item(terms.center)?;
        report.total = g.item(total)?;
        tag(g.backward(total), "total", step)?;
        state.generator.zero_grad();
        state.generator.accumulate_from(&g, &gp)?;
        tag(state.opt_generator.step(&mut state.generator, &adam), "total", step)?;
        state.generator.clear_grad();
    }

    if let Some(term) = report.first_non_finite() {
        return Err(Error::NonFinite(format!("{term} at step {step}")));
    }
    state.step = step;
    Ok(report)
}

/// Seeded permutation of the training indices for one epoch.
pub fn epoch_order(config: &TrainConfig, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.stream_seed(1000 + epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Hooks into a running [`fit`].
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every report in memory.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    pub reports: Vec<(u64, LossReport)>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, step: u64, report: &LossReport) -> Result<()> {
        self.reports.push((step, *report));
        Ok(())
    }
}

/// Initializes, computes the center, and trains for `config.epochs`.
pub fn fit(config: &TrainConfig, training_set: &Tensor, observer: &mut dyn TrainObserver) -> Result<Checkpoint> {
    let n = training_set.shape().first().copied().unwrap_or(0);
    config.validate_for(n)?;
    let mut state = Checkpoint::initialize(config, training_set)?;
    resume(&mut state, training_set, observer)?;
    Ok(state)
}

/// Continues `state` from its recorded epoch up to `state.config.epochs`.
pub fn resume(state: &mut Checkpoint, training_set: &Tensor, observer: &mut dyn TrainObserver) -> Result<()> {
    let n = training_set.shape().first().copied().unwrap_or(0);
    state.config.validate_for(n)?;
    let batch_size = state.config.batch_size;
    while state.epoch < state.config.epochs as u64 {
        let order = epoch_order(&state.config, state.epoch, n);
        for chunk in order.chunks(batch_size) {
            let batch = training_set.select_rows(chunk)?;
            let report = train_step(state, &batch)?;
            observer.on_step(state.step, &report)?;
        }
        state.epoch += 1;
        observer.on_epoch_end(state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ArchSpec;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: ArchSpec {
                base_filters: 4,
                latent_dim: 8,
                ..ArchSpec::default()
            },
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 256;
        Tensor::new(
            vec![n, 1, 16, 16],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn guard_pushes_small_coordinates_out() {
        let z = Tensor::new(vec![2, 3], vec![0.001, -0.004, 2.0, 0.003, -0.002, 4.0]).unwrap();
        let c = LatentCenter::from_latents(&z).unwrap();
        assert_eq!(c.c, vec![CENTER_GUARD, -CENTER_GUARD, 3.0]);
        assert_eq!(c.n_samples_used, 2);
    }

    #[test]
    fn empty_training_set_is_config_error() {
        let x = images(3, 0);
        assert!(matches!(gather(&x, &[]), Err(Error::Config(_))));
        assert_eq!(gather(&x, &[2]).unwrap().shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn single_sample_center_is_its_latent() {
        // Scale the weights up so no coordinate falls under the guard.
        let mut g = init_network(&tiny_config().arch, NetworkKind::Generator, 5).unwrap();
        g.tensors_mut()
            .for_each(|t| t.values_mut().iter_mut().for_each(|v| *v *= 25.0));
        let x = images(1, 4);
        let z = networks::encode(&g, &x).unwrap();
        assert!(z.values().iter().all(|v| v.abs() >= CENTER_GUARD));
        let c = compute_center(&g, &x).unwrap();
        assert_eq!(c.c, z.values());
        assert_eq!(c.mean_radius_at_init, 0.0);
    }

    #[test]
    fn zero_weights_and_zero_lr_change_nothing() {
        let cfg = TrainConfig {
            weights: LossWeights::zero(),
            learning_rate: 0.0,
            ..tiny_config()
        };
        let x = images(8, 1);
        let mut state = Checkpoint::initialize(&cfg, &x).unwrap();
        let before = state.clone();
        train_step(&mut state, &x.select_rows(&[0, 1, 2, 3]).unwrap()).unwrap();
        assert_eq!(state.generator.checksum(), before.generator.checksum());
        assert_eq!(state.discriminator.checksum(), before.discriminator.checksum());
        assert_eq!(state.auxiliary.checksum(), before.auxiliary.checksum());
    }

    #[test]
    fn report_satisfies_dual_identity() {
        let cfg = tiny_config();
        let x = images(8, 2);
        let mut state = Checkpoint::initialize(&cfg, &x).unwrap();
        let r = train_step(&mut state, &x.select_rows(&[4, 5, 6, 7]).unwrap()).unwrap();
        assert_eq!(r.dual, r.girec - cfg.weights.k * r.direc);
        assert!(r.irec >= 0.0 && r.adv_g >= 0.0 && r.adv_d >= 0.0 && r.zrec >= 0.0 && r.center >= 0.0);
    }

    #[test]
    fn batch_shape_is_checked() {
        let cfg = tiny_config();
        let x = images(8, 3);
        let mut state = Checkpoint::initialize(&cfg, &x).unwrap();
        let wrong = Tensor::zeros(vec![2, 1, 32, 32]);
        assert!(matches!(train_step(&mut state, &wrong), Err(Error::Dimension { .. })));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 64,
            ..tiny_config()
        };
        assert!(matches!(fit(&cfg, &images(8, 0), &mut ()), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let cfg = tiny_config();
        let a = epoch_order(&cfg, 0, 50);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(&cfg, 0, 50));
        assert_ne!(a, epoch_order(&cfg, 1, 50));
    }
}

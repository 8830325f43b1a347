//! Randomized finite-difference checks for every graph operation and for the
//! three training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradients, check_gradients_with, CheckOptions};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossWeights};
use crate::networks::{self, init_network, ArchSpec, Bound, NetworkKind};
use crate::tensor::Tensor;
use crate::trainer::{generator_objective, LatentCenter};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const OP_EPS: f64 = 1e-5;
const E2E_EPS: f64 = 1e-6;
/// One-sided differences further apart than this mark a kink (ReLU or L1)
/// inside the stencil.
const E2E_KINK_TOLERANCE: f64 = 1e-3;
/// At most this fraction of end-to-end entries may be skipped as kinks.
pub const MAX_NONSMOOTH_FRACTION: f64 = 0.05;
/// Entries perturbed per network tensor in the end-to-end checks.
const E2E_SAMPLE: usize = 4;
/// Network parameters are rescaled to this spread for the end-to-end
/// checks so gradients are far above finite-difference noise.
const E2E_PARAM_SCALE: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub instances: usize,
    pub max_relative_error: f64,
    pub entries_checked: usize,
    pub nonsmooth_skipped: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
            && (self.nonsmooth_skipped as f64) <= MAX_NONSMOOTH_FRACTION * self.entries_checked as f64
    }
}

type Build = fn(&mut ChaCha8Rng) -> Case;

/// Inputs and the scalar function checked on them.
type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("finite")
}

/// Values with magnitude in `[0.1, 1.5]` and random sign, away from kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("finite")
}

fn dims(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(1..5)).collect()
}

/// `sum(w ⊙ y)` for a fixed random `w`, turning any output into a scalar
/// with generic gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = off_zero(&mut rng, g.shape(y));
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

macro_rules! unary_case {
    ($name:literal, $gen:expr, $body:expr) => {
        (
            $name,
            (|rng: &mut ChaCha8Rng| {
                let shape = dims(rng, 3);
                let x = $gen(rng, &shape);
                let seed = rng.random();
                let f: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>> = Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = $body(g, v[0])?;
                    project(g, y, seed)
                });
                (vec![x], f)
            }) as Build,
        )
    };
}

fn wide(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -2.0, 2.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.05, 2.0)
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Result<Var>, scalar_rhs: bool) -> Case {
    let shape = dims(rng, 3);
    let a = wide(rng, &shape);
    let b = if scalar_rhs {
        Tensor::scalar(rng.random_range(-2.0..2.0))
    } else {
        wide(rng, &shape)
    };
    let seed = rng.random();
    (
        vec![a, b],
        Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            project(g, y, seed)
        }),
    )
}

fn conv_case(rng: &mut ChaCha8Rng, transposed: bool) -> Case {
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let f = rng.random_range(1..4);
    let k = rng.random_range(1..5);
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..2).min(k - 1);
    let (h, w) = (rng.random_range(k.max(2)..7), rng.random_range(k.max(2)..7));
    let x = wide(rng, &[n, c, h, w]);
    let (kernel, bias) = if transposed {
        (wide(rng, &[c, f, k, k]), wide(rng, &[f]))
    } else {
        (wide(rng, &[f, c, k, k]), wide(rng, &[f]))
    };
    let seed = rng.random();
    (
        vec![x, kernel, bias],
        Box::new(move |g, v| {
            let y = if transposed {
                g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)?
            } else {
                g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?
            };
            project(g, y, seed)
        }),
    )
}

fn op_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |r| binary(r, Graph::add, false)),
        ("sub", |r| binary(r, Graph::sub, false)),
        ("mul", |r| binary(r, Graph::mul, false)),
        ("add_scalar", |r| binary(r, Graph::add, true)),
        ("mul_scalar", |r| binary(r, Graph::mul, true)),
        unary_case!("scale", wide, |g: &mut Graph, x| g.scale(x, -1.7)),
        unary_case!("offset", wide, |g: &mut Graph, x| g.offset(x, 0.3)),
        unary_case!("leaky_relu", off_zero, |g: &mut Graph, x| g.leaky_relu(x, 0.2)),
        unary_case!("relu", off_zero, |g: &mut Graph, x| g.relu(x)),
        unary_case!("sigmoid", wide, |g: &mut Graph, x| g.sigmoid(x)),
        unary_case!("tanh", wide, |g: &mut Graph, x| g.tanh(x)),
        unary_case!("abs", off_zero, |g: &mut Graph, x| g.abs(x)),
        unary_case!("square", wide, |g: &mut Graph, x| g.square(x)),
        unary_case!("ln_clamped", positive, |g: &mut Graph, x| g.ln_clamped(x, 1e-8)),
        unary_case!("sum", wide, |g: &mut Graph, x| g.sum(x)),
        unary_case!("mean", wide, |g: &mut Graph, x| g.mean(x)),
        unary_case!("row_sum", wide, |g: &mut Graph, x| g.row_sum(x)),
        unary_case!("reshape", wide, |g: &mut Graph, x| {
            let n = g.shape(x).iter().product::<usize>();
            g.reshape(x, &[n])
        }),
        ("row_norm", |rng| {
            let shape = dims(rng, 2);
            let x = off_zero(rng, &shape);
            let seed = rng.random();
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = g.row_norm(v[0])?;
                    project(g, y, seed)
                }),
            )
        }),
        ("matmul", |rng| {
            let d = dims(rng, 3);
            let a = wide(rng, &[d[0], d[1]]);
            let b = wide(rng, &[d[1], d[2]]);
            let seed = rng.random();
            (
                vec![a, b],
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, seed)
                }),
            )
        }),
        ("bias_add", |rng| {
            let d = dims(rng, 4);
            let a = wide(rng, &d);
            let b = wide(rng, &[d[1]]);
            let seed = rng.random();
            (
                vec![a, b],
                Box::new(move |g, v| {
                    let y = g.bias_add(v[0], v[1])?;
                    project(g, y, seed)
                }),
            )
        }),
        ("conv2d", |r| conv_case(r, false)),
        ("conv_transpose2d", |r| conv_case(r, true)),
    ]
}

fn grad_arch() -> ArchSpec {
    ArchSpec {
        image_channels: 1,
        image_size: 16,
        latent_dim: 4,
        base_filters: 2,
        layers_per_stage: 1,
    }
}

/// Freshly initialized parameters, spread out by `E2E_PARAM_SCALE`, with
/// random nonzero biases. Zero biases put pre-activations exactly on ReLU
/// kinks wherever the layer input is zero.
fn scaled_network(kind: NetworkKind, seed: u64) -> Result<Vec<Tensor>> {
    let mut p = init_network(&grad_arch(), kind, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in &mut p.entries {
        let is_bias = name.ends_with(".bias");
        for v in t.values_mut() {
            *v = if is_bias {
                rng.random_range(-0.5..0.5)
            } else {
                *v * E2E_PARAM_SCALE
            };
        }
    }
    Ok(p.entries.into_iter().map(|(_, t)| t).collect())
}

fn bound(vars: &[Var]) -> Bound {
    Bound { vars: vars.to_vec() }
}

/// Loss of one of the three players with respect to its own parameters.
fn objective_case(which: NetworkKind, seed: u64) -> Result<crate::gradcheck::GradReport> {
    let arch = grad_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &arch.image_shape(2), -1.0, 1.0);
    let gen = scaled_network(NetworkKind::Generator, rng.random())?;
    let dis = scaled_network(NetworkKind::Discriminator, rng.random())?;
    let aux = scaled_network(NetworkKind::Auxiliary, rng.random())?;
    let center = LatentCenter {
        c: (0..arch.latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        n_samples_used: 1,
        mean_radius_at_init: 0.0,
    };
    let w = LossWeights::default();
    let (n_g, n_d) = (gen.len(), dis.len());
    let inputs: Vec<Tensor> = [gen, dis, aux].concat();
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let (gp, rest) = v.split_at(n_g);
        let (dp, ap) = rest.split_at(n_d);
        let (gp, dp, ap) = (bound(gp), bound(dp), bound(ap));
        let xv = g.constant(&x);
        match which {
            NetworkKind::Generator => Ok(generator_objective(g, &arch, &center, &w, [&gp, &dp, &ap], xv, 0)?.1),
            NetworkKind::Discriminator => {
                let (_, gx) = networks::autoencode_on(g, &arch, &gp, xv)?;
                let real = networks::discriminate_on(g, &arch, &dp, xv)?;
                let fake = networks::discriminate_on(g, &arch, &dp, gx)?;
                losses::adv_loss_d(g, real, fake)
            }
            NetworkKind::Auxiliary => {
                let (_, gx) = networks::autoencode_on(g, &arch, &gp, xv)?;
                let (_, dx) = networks::autoencode_on(g, &arch, &ap, xv)?;
                let (_, dgx) = networks::autoencode_on(g, &arch, &ap, gx)?;
                Ok(losses::dual_loss(g, xv, gx, dx, dgx, w.k)?.dual)
            }
        }
    };
    let opts = CheckOptions {
        epsilon: E2E_EPS,
        sample: Some((E2E_SAMPLE, seed)),
        kink_tolerance: Some(E2E_KINK_TOLERANCE),
    };
    check_gradients_with(f, &inputs, &opts)
}

/// Runs every per-op case and the three objective cases `instances` times.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for (i, (name, build)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64) << 20);
        let mut case = CaseResult {
            name,
            tolerance: OP_TOLERANCE,
            instances,
            max_relative_error: 0.0,
            entries_checked: 0,
            nonsmooth_skipped: 0,
        };
        for _ in 0..instances {
            let (inputs, f) = build(&mut rng);
            let r = check_gradients(|g, v| f(g, v), &inputs, OP_EPS, None)?;
            case.max_relative_error = case.max_relative_error.max(r.max_relative_error);
            case.entries_checked += r.entries_checked;
        }
        results.push(case);
    }
    for (name, kind) in [
        ("objective_generator", NetworkKind::Generator),
        ("objective_discriminator", NetworkKind::Discriminator),
        ("objective_auxiliary", NetworkKind::Auxiliary),
    ] {
        let mut case = CaseResult {
            name,
            tolerance: END_TO_END_TOLERANCE,
            instances,
            max_relative_error: 0.0,
            entries_checked: 0,
            nonsmooth_skipped: 0,
        };
        for i in 0..instances as u64 {
            let r = objective_case(kind, seed.wrapping_add(i * 7919))?;
            case.max_relative_error = case.max_relative_error.max(r.max_relative_error);
            case.entries_checked += r.entries_checked;
            case.nonsmooth_skipped += r.nonsmooth_skipped;
        }
        results.push(case);
    }
    Ok(results)
}

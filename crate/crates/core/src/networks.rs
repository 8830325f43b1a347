//! The generator autoencoder, the binary discriminator, and the auxiliary
//! autoencoder.
//!
//! Encoders (and the discriminator trunk) are stacks of stride-2 4×4
//! convolutions with leaky-relu(0.2), halving the image down to 4×4, followed
//! by a dense projection. Decoders mirror that with transposed convolutions
//! and relu, ending in `tanh` so reconstructions live in `[-1, 1]` like the
//! normalized inputs. There is no normalization layer: every forward pass is
//! a pure per-sample function of `(params, input)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
const DOWN_KERNEL: usize = 4;
const SIDE_KERNEL: usize = 3;
const BOTTOM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub image_channels: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub base_filters: usize,
    /// Convolutions per resolution: one strided layer plus
    /// `layers_per_stage - 1` shape-preserving 3×3 layers.
    pub layers_per_stage: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            image_channels: 1,
            image_size: 16,
            latent_dim: 32,
            base_filters: 16,
            layers_per_stage: 1,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_channels == 0 {
            return bad("image_channels must be positive".into());
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return bad(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            ));
        }
        if self.latent_dim < 2 {
            return bad(format!("latent_dim must be >= 2, got {}", self.latent_dim));
        }
        if self.base_filters == 0 || self.layers_per_stage == 0 {
            return bad("base_filters and layers_per_stage must be positive".into());
        }
        Ok(())
    }

    /// Number of stride-2 stages between the image and the 4×4 bottom.
    pub fn stages(&self) -> usize {
        (self.image_size / BOTTOM).trailing_zeros() as usize
    }

    pub fn filters(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    /// Width of the flattened 4×4 feature map at the bottom.
    pub fn bottom_len(&self) -> usize {
        self.filters(self.stages() - 1) * BOTTOM * BOTTOM
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.image_channels, self.image_size, self.image_size]
    }

    pub fn pixels(&self) -> usize {
        self.image_channels * self.image_size * self.image_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    Auxiliary,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Generator => "generator",
            NetworkKind::Discriminator => "discriminator",
            NetworkKind::Auxiliary => "auxiliary",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "generator" => Some(NetworkKind::Generator),
            "discriminator" => Some(NetworkKind::Discriminator),
            "auxiliary" => Some(NetworkKind::Auxiliary),
            _ => None,
        }
    }

    fn is_autoencoder(self) -> bool {
        !matches!(self, NetworkKind::Discriminator)
    }
}

/// Named parameter tensors of one network, in a fixed layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub kind: NetworkKind,
    pub arch: ArchSpec,
    pub init_seed: u64,
    pub entries: Vec<(String, Tensor)>,
}

fn encoder_layout(arch: &ArchSpec, out: &mut Vec<(String, Vec<usize>)>) {
    let mut in_ch = arch.image_channels;
    for s in 0..arch.stages() {
        let f = arch.filters(s);
        for l in 0..arch.layers_per_stage {
            let k = if l == 0 { DOWN_KERNEL } else { SIDE_KERNEL };
            out.push((format!("enc.s{s}.l{l}.weight"), vec![f, in_ch, k, k]));
            out.push((format!("enc.s{s}.l{l}.bias"), vec![f]));
            in_ch = f;
        }
    }
}

/// `(name, shape)` of every parameter, in binding order.
pub fn layout(arch: &ArchSpec, kind: NetworkKind) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    encoder_layout(arch, &mut out);
    let bottom = arch.bottom_len();
    if kind.is_autoencoder() {
        out.push(("enc.fc.weight".into(), vec![bottom, arch.latent_dim]));
        out.push(("enc.fc.bias".into(), vec![arch.latent_dim]));
        out.push(("dec.fc.weight".into(), vec![arch.latent_dim, bottom]));
        out.push(("dec.fc.bias".into(), vec![bottom]));
        for s in (0..arch.stages()).rev() {
            let f = arch.filters(s);
            for l in (1..arch.layers_per_stage).rev() {
                // Transposed-conv kernels are [in, out, kH, kW].
                out.push((format!("dec.s{s}.l{l}.weight"), vec![f, f, SIDE_KERNEL, SIDE_KERNEL]));
                out.push((format!("dec.s{s}.l{l}.bias"), vec![f]));
            }
            let below = if s == 0 {
                arch.image_channels
            } else {
                arch.filters(s - 1)
            };
            out.push((format!("dec.s{s}.l0.weight"), vec![f, below, DOWN_KERNEL, DOWN_KERNEL]));
            out.push((format!("dec.s{s}.l0.bias"), vec![below]));
        }
    } else {
        out.push(("head.weight".into(), vec![bottom, 1]));
        out.push(("head.bias".into(), vec![1]));
    }
    out
}

/// Total scalar parameter count of a network.
pub fn parameter_count(arch: &ArchSpec, kind: NetworkKind) -> usize {
    layout(arch, kind)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Seeded initialization: weights ~ N(0, 0.02²), biases zero.
pub fn init_network(arch: &ArchSpec, kind: NetworkKind, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("fixed positive std");
    let entries = layout(arch, kind)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            (name, Tensor::from_parts(shape, values).with_requires_grad(true))
        })
        .collect();
    Ok(NetworkParams {
        kind,
        arch: *arch,
        init_seed: seed,
        entries,
    })
}

/// Parameters registered on a graph, in layout order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl NetworkParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        Bound { vars }
    }

    pub fn shapes(&self) -> Vec<(&str, &[usize])> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.shape())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::clear_grad);
    }

    /// Combined checksum of all parameter values.
    pub fn checksum(&self) -> u64 {
        self.entries
            .iter()
            .fold(0u64, |h, (_, t)| h.rotate_left(7) ^ t.checksum())
    }

    /// Copies the gradients of a backward pass into the parameter tensors.
    pub fn accumulate_from(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    fn expect_kind(&self, autoencoder: bool, op: &str) -> Result<()> {
        if self.kind.is_autoencoder() != autoencoder {
            return Err(Error::Usage(format!(
                "{op} is not defined for the {} network",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

fn check_image(g: &Graph, arch: &ArchSpec, x: Var) -> Result<usize> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1..] != arch.image_shape(1)[1..] {
        return Err(Error::dim("network input", shape, &arch.image_shape(1)));
    }
    Ok(shape[0])
}

/// Conv trunk shared by encoders and the discriminator; returns the
/// flattened `[N, bottom_len]` features and the next unread parameter slot.
fn trunk(g: &mut Graph, arch: &ArchSpec, p: &Bound, x: Var) -> Result<(Var, usize)> {
    let n = check_image(g, arch, x)?;
    let mut h = x;
    let mut i = 0;
    for _ in 0..arch.stages() {
        for l in 0..arch.layers_per_stage {
            let (stride, pad) = if l == 0 { (2, 1) } else { (1, 1) };
            h = g.conv2d(h, p.vars[i], Some(p.vars[i + 1]), stride, pad)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            i += 2;
        }
    }
    let flat = g.reshape(h, &[n, arch.bottom_len()])?;
    Ok((flat, i))
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.bias_add(y, b)
}

/// Number of parameter tensors belonging to an autoencoder's encoder half.
fn encoder_slots(arch: &ArchSpec) -> usize {
    2 * arch.stages() * arch.layers_per_stage + 2
}

/// `z = G_e(x)` on a graph: `[N, C, H, W] -> [N, latent_dim]`.
pub fn encode_on(g: &mut Graph, arch: &ArchSpec, p: &Bound, x: Var) -> Result<Var> {
    let (flat, i) = trunk(g, arch, p, x)?;
    dense(g, flat, p.vars[i], p.vars[i + 1])
}

/// `G_d(z)` on a graph: `[N, latent_dim] -> [N, C, H, W]` in `[-1, 1]`.
pub fn decode_on(g: &mut Graph, arch: &ArchSpec, p: &Bound, z: Var) -> Result<Var> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[1] != arch.latent_dim {
        return Err(Error::dim(
            "decode",
            shape,
            &[shape.first().copied().unwrap_or(0), arch.latent_dim],
        ));
    }
    let n = shape[0];
    let mut i = encoder_slots(arch);
    let h = dense(g, z, p.vars[i], p.vars[i + 1])?;
    i += 2;
    let top = arch.stages() - 1;
    let h = g.reshape(h, &[n, arch.filters(top), BOTTOM, BOTTOM])?;
    let mut h = g.relu(h)?;
    for s in (0..arch.stages()).rev() {
        for l in (0..arch.layers_per_stage).rev() {
            let stride = if l == 0 { 2 } else { 1 };
            h = g.conv_transpose2d(h, p.vars[i], Some(p.vars[i + 1]), stride, 1)?;
            i += 2;
            h = if s == 0 && l == 0 { g.tanh(h)? } else { g.relu(h)? };
        }
    }
    Ok(h)
}

/// `D(x)` on a graph: `[N, C, H, W] -> [N, 1]` in `(0, 1)`.
pub fn discriminate_on(g: &mut Graph, arch: &ArchSpec, p: &Bound, x: Var) -> Result<Var> {
    let (flat, i) = trunk(g, arch, p, x)?;
    let logit = dense(g, flat, p.vars[i], p.vars[i + 1])?;
    g.sigmoid(logit)
}

/// Latent code and reconstruction of an autoencoder in one pass.
pub fn autoencode_on(g: &mut Graph, arch: &ArchSpec, p: &Bound, x: Var) -> Result<(Var, Var)> {
    let z = encode_on(g, arch, p, x)?;
    let y = decode_on(g, arch, p, z)?;
    Ok((z, y))
}

pub fn encode(params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    params.expect_kind(true, "encode")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x);
    let z = encode_on(&mut g, &params.arch, &p, xv)?;
    Ok(g.tensor(z))
}

pub fn decode(params: &NetworkParams, z: &Tensor) -> Result<Tensor> {
    params.expect_kind(true, "decode")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(z);
    let y = decode_on(&mut g, &params.arch, &p, zv)?;
    Ok(g.tensor(y))
}

/// Full reconstruction `G_d(G_e(x))`.
pub fn reconstruct(params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    params.expect_kind(true, "reconstruct")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x);
    let (_, y) = autoencode_on(&mut g, &params.arch, &p, xv)?;
    Ok(g.tensor(y))
}

pub fn discriminate(params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    params.expect_kind(false, "discriminate")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x);
    let y = discriminate_on(&mut g, &params.arch, &p, xv)?;
    Ok(g.tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ArchSpec {
        ArchSpec {
            image_channels: 1,
            image_size: 16,
            latent_dim: 32,
            base_filters: 8,
            layers_per_stage: 1,
        }
    }

    fn random_images(arch: &ArchSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = arch.image_shape(n);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(&small(), NetworkKind::Generator, 7).unwrap();
        let b = init_network(&small(), NetworkKind::Generator, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.entries.iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn generator_and_auxiliary_share_shapes_not_values() {
        let g = init_network(&small(), NetworkKind::Generator, 1).unwrap();
        let d = init_network(&small(), NetworkKind::Auxiliary, 2).unwrap();
        assert_eq!(g.shapes(), d.shapes());
        assert_ne!(g.checksum(), d.checksum());
    }

    #[test]
    fn closed_form_parameter_count() {
        // 16 -> 8 -> 4 with 8 then 16 filters, 4x4 kernels, latent 32.
        let conv = |f: usize, c: usize| f * c * 16 + f;
        let bottom = 16 * 4 * 4;
        let encoder = conv(8, 1) + conv(16, 8) + bottom * 32 + 32;
        let decoder = 32 * bottom + bottom + (16 * 8 * 16 + 8) + (8 * 16 + 1);
        assert_eq!(encoder + decoder, 21_057);
        let arch = small();
        assert_eq!(arch.stages(), 2);
        assert_eq!(parameter_count(&arch, NetworkKind::Generator), encoder + decoder);
        let disc = conv(8, 1) + conv(16, 8) + bottom + 1;
        assert_eq!(parameter_count(&arch, NetworkKind::Discriminator), disc);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for arch in [
            ArchSpec {
                image_size: 24,
                ..small()
            },
            ArchSpec {
                image_size: 8,
                ..small()
            },
            ArchSpec {
                latent_dim: 1,
                ..small()
            },
            ArchSpec {
                base_filters: 0,
                ..small()
            },
        ] {
            assert!(matches!(
                init_network(&arch, NetworkKind::Generator, 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let p = init_network(&small(), NetworkKind::Generator, 3).unwrap();
        for n in [1, 3, 5] {
            let x = random_images(&small(), n, n as u64);
            let z = encode(&p, &x).unwrap();
            assert_eq!(z.shape(), &[n, 32]);
            assert_eq!(z, encode(&p, &x).unwrap());
        }
    }

    #[test]
    fn different_inputs_give_different_latents() {
        let p = init_network(&small(), NetworkKind::Generator, 3).unwrap();
        let x = random_images(&small(), 16, 9);
        let z = encode(&p, &x).unwrap();
        let rows: Vec<&[f64]> = z.values().chunks(32).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn decode_range_and_round_trip_shape() {
        let arch = ArchSpec {
            layers_per_stage: 2,
            image_size: 32,
            ..small()
        };
        let p = init_network(&arch, NetworkKind::Auxiliary, 4).unwrap();
        let x = random_images(&arch, 2, 1);
        let y = reconstruct(&p, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let p = init_network(&small(), NetworkKind::Generator, 3).unwrap();
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(matches!(encode(&p, &x), Err(Error::Dimension { .. })));
        let z = Tensor::zeros(vec![1, 5]);
        assert!(matches!(decode(&p, &z), Err(Error::Dimension { .. })));
        let d = init_network(&small(), NetworkKind::Discriminator, 3).unwrap();
        assert!(matches!(discriminate(&d, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn discriminator_output_is_a_probability_near_half_at_init() {
        let d = init_network(&small(), NetworkKind::Discriminator, 5).unwrap();
        let x = random_images(&small(), 256, 11);
        let y = discriminate(&d, &x).unwrap();
        assert_eq!(y.shape(), &[256, 1]);
        assert!(y.values().iter().all(|&v| v > 0.0 && v < 1.0));
        let mean = y.values().iter().sum::<f64>() / 256.0;
        assert!((mean - 0.5).abs() < 0.2, "{mean}");
        assert_eq!(y, discriminate(&d, &x).unwrap());
    }

    #[test]
    fn kind_mismatch_is_usage_error() {
        let d = init_network(&small(), NetworkKind::Discriminator, 5).unwrap();
        let x = random_images(&small(), 1, 0);
        assert!(matches!(encode(&d, &x), Err(Error::Usage(_))));
    }
}

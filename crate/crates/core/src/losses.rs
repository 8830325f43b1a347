//! Every term of the weighted training objective.
//!
//! All L1 terms are per-pixel means, so the weights do not depend on image
//! size. Logarithms clamp their argument below at [`LOG_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::trainer::LatentCenter;

pub const LOG_FLOOR: f64 = 1e-8;

/// Weights of the five objective terms and the dual-loss balance `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_i: f64,
    pub w_a: f64,
    pub w_z: f64,
    pub w_c: f64,
    pub w_d: f64,
    pub k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_i: 1.0,
            w_a: 5.0,
            w_z: 1.0,
            w_c: 0.05,
            w_d: 1.0,
            k: 0.4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            w_i: 0.0,
            w_a: 0.0,
            w_z: 0.0,
            w_c: 0.0,
            w_d: 0.0,
            k: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_i", self.w_i),
            ("w_a", self.w_a),
            ("w_z", self.w_z),
            ("w_c", self.w_c),
            ("w_d", self.w_d),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::Config(format!("k must lie in [0, 1], got {}", self.k)));
        }
        Ok(())
    }
}

/// Scalar values of every term for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub irec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub zrec: f64,
    pub center: f64,
    pub girec: f64,
    pub direc: f64,
    pub dual: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,irec,adv_g,adv_d,zrec,center,girec,direc,dual,total";

impl LossReport {
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.irec, self.adv_g, self.adv_d, self.zrec, self.center, self.girec, self.direc, self.dual, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<(u64, LossReport)> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!("loss row needs 10 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number {:?} in loss row", fields[i])))
        };
        let step = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad step {:?}", fields[0])))?;
        Ok((
            step,
            LossReport {
                irec: num(1)?,
                adv_g: num(2)?,
                adv_d: num(3)?,
                zrec: num(4)?,
                center: num(5)?,
                girec: num(6)?,
                direc: num(7)?,
                dual: num(8)?,
                total: num(9)?,
            },
        ))
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("irec", self.irec),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("zrec", self.zrec),
            ("center", self.center),
            ("girec", self.girec),
            ("direc", self.direc),
            ("dual", self.dual),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_probabilities(g: &Graph, v: Var, what: &str) -> Result<()> {
    if let Some(bad) = g.values(v).iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("{what} must lie in (0, 1), got {bad}")));
    }
    Ok(())
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `-mean(ln 𝐷(x)) - mean(ln(1 - 𝐷(G(x))))`, minimized by the discriminator.
pub fn adv_loss_d(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    check_probabilities(g, d_real, "d_real")?;
    check_probabilities(g, d_fake, "d_fake")?;
    let log_real = g.ln_clamped(d_real, LOG_FLOOR)?;
    let real = g.mean(log_real)?;
    let neg_fake = g.scale(d_fake, -1.0)?;
    let one_minus = g.offset(neg_fake, 1.0)?;
    let log_fake = g.ln_clamped(one_minus, LOG_FLOOR)?;
    let fake = g.mean(log_fake)?;
    let s = g.add(real, fake)?;
    g.scale(s, -1.0)
}

/// Non-saturating generator loss `-mean(ln 𝐷(G(x)))`.
pub fn adv_loss_g(g: &mut Graph, d_fake: Var) -> Result<Var> {
    check_probabilities(g, d_fake, "d_fake")?;
    let log_fake = g.ln_clamped(d_fake, LOG_FLOOR)?;
    let m = g.mean(log_fake)?;
    g.scale(m, -1.0)
}

/// Per-pixel mean absolute difference, averaged over the batch.
pub fn l1_mean(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "l1", a, b)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Image reconstruction loss `E‖x − G(x)‖₁` (per pixel).
pub fn irec_loss(g: &mut Graph, x: Var, gx: Var) -> Result<Var> {
    l1_mean(g, x, gx)
}

/// Mean squared Euclidean distance of each latent row to the fixed center.
/// The center is a constant; no gradient reaches it.
pub fn center_loss(g: &mut Graph, z: Var, c: &LatentCenter) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != c.c.len() {
        return Err(Error::dim("center_loss", &shape, &[c.c.len()]));
    }
    let tiled: Vec<f64> = (0..shape[0]).flat_map(|_| c.c.iter().copied()).collect();
    let cv = g.constant(&Tensor::new(shape, tiled)?);
    let d = g.sub(z, cv)?;
    let sq = g.square(d)?;
    let per_row = g.row_sum(sq)?;
    g.mean(per_row)
}

/// Mean Euclidean distance between `z = G_e(x)` and `z′ = G_e′(G(x))`.
pub fn zrec_loss(g: &mut Graph, z: Var, z_prime: Var) -> Result<Var> {
    same_shape(g, "zrec_loss", z, z_prime)?;
    if g.shape(z).len() != 2 {
        return Err(Error::dim("zrec_loss", g.shape(z), &[0, 0]));
    }
    let d = g.sub(z, z_prime)?;
    let norms = g.row_norm(d)?;
    g.mean(norms)
}

/// The three dual-autoencoder quantities.
#[derive(Debug, Clone, Copy)]
pub struct DualTerms {
    /// `‖x − D′(x)‖₁`
    pub girec: Var,
    /// `‖G(x) − D′(G(x))‖₁`
    pub direc: Var,
    /// `girec − k·direc`
    pub dual: Var,
}

pub fn dual_loss(g: &mut Graph, x: Var, gx: Var, dprime_x: Var, dprime_gx: Var, k: f64) -> Result<DualTerms> {
    same_shape(g, "dual_loss", x, gx)?;
    same_shape(g, "dual_loss", x, dprime_x)?;
    same_shape(g, "dual_loss", x, dprime_gx)?;
    let girec = l1_mean(g, x, dprime_x)?;
    let direc = l1_mean(g, gx, dprime_gx)?;
    let scaled = g.scale(direc, k)?;
    let dual = g.sub(girec, scaled)?;
    Ok(DualTerms { girec, direc, dual })
}

/// Scalar terms entering the generator's update.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub irec: Var,
    pub adv_g: Var,
    pub zrec: Var,
    pub center: Var,
    pub direc: Var,
}

/// `w_i·irec + w_a·adv_g + w_z·zrec + w_c·center + w_d·direc`.
pub fn total_generator_loss(g: &mut Graph, t: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        (t.irec, w.w_i),
        (t.adv_g, w.w_a),
        (t.zrec, w.w_z),
        (t.center, w.w_c),
        (t.direc, w.w_d),
    ];
    let mut acc = g.scale(parts[0].0, parts[0].1)?;
    for &(v, wt) in &parts[1..] {
        let s = g.scale(v, wt)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

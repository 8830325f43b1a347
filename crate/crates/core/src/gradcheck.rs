//! Central finite-difference verification of autodiff gradients.
//!
//! The function under test must be deterministic; that is the caller's
//! responsibility and is not checked.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the autodiff gradient of the scalar map `f` at `x` against a
/// central difference with step `epsilon`, entry by entry, and returns the
/// largest relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), epsilon, None)?;
    Ok(report.max_relative_error)
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Entries whose one-sided differences disagree, i.e. the function has
    /// a kink inside the stencil; these are excluded from the maximum.
    pub nonsmooth_skipped: usize,
}

/// Settings for [`check_gradients_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub epsilon: f64,
    /// Perturb only `k` seeded-random entries per input.
    pub sample: Option<(usize, u64)>,
    /// When set, an entry is skipped as non-smooth if its forward and
    /// backward differences differ by more than this relative amount.
    pub kink_tolerance: Option<f64>,
}

/// Multi-input form of [`finite_diff_check`].
///
/// With `sample = Some((k, seed))` only `k` seeded-random entries of each
/// input are perturbed, which keeps checks on whole networks affordable.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], epsilon: f64, sample: Option<(usize, u64)>) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(
        f,
        inputs,
        &CheckOptions {
            epsilon,
            sample,
            kink_tolerance: None,
        },
    )
}

/// [`check_gradients`] with optional detection of non-differentiable points.
///
/// For a kink inside `[x - ε, x + ε]` the central-difference error is half
/// the gap between the one-sided differences, so that gap identifies the
/// entries a finite-difference check cannot judge.
pub fn check_gradients_with<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let CheckOptions {
        epsilon,
        sample,
        kink_tolerance,
    } = *opts;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        g.item(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut perturbed = inputs.to_vec();
    let mut report = GradReport {
        max_relative_error: 0.0,
        entries_checked: 0,
        worst: None,
        nonsmooth_skipped: 0,
    };
    let center = if kink_tolerance.is_some() { eval(inputs)? } else { 0.0 };
    for which in 0..inputs.len() {
        let len = inputs[which].len();
        let indices: Vec<usize> = match (&mut rng, sample) {
            (Some(rng), Some((k, _))) if k < len => index::sample(rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in indices {
            let orig = inputs[which].values()[i];
            perturbed[which].values_mut()[i] = orig + epsilon;
            let plus = eval(&perturbed)?;
            perturbed[which].values_mut()[i] = orig - epsilon;
            let minus = eval(&perturbed)?;
            perturbed[which].values_mut()[i] = orig;
            report.entries_checked += 1;
            if let Some(tol) = kink_tolerance {
                let (fwd, bwd) = ((plus - center) / epsilon, (center - minus) / epsilon);
                if relative_error(fwd, bwd) > tol {
                    report.nonsmooth_skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[which][i], numeric);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((which, i));
            }
        }
    }
    Ok(report)
}

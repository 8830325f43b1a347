use crate::error::{Error, Result};
use crate::networks::NetworkParams;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam step at time `t` (1-based), in place.
pub fn adam_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, s: &AdamSettings, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Usage("adam step counter starts at 1".into()));
    }
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::dim(
            "adam_update",
            &[param.len()],
            &[grad.len(), moments.m.len()],
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        let m = s.beta1 * moments.m[i] + (1.0 - s.beta1) * g;
        let v = s.beta2 * moments.v[i] + (1.0 - s.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        param[i] -= s.lr * (m / c1) / ((v / c2).sqrt() + s.eps);
    }
    Ok(())
}

/// Adam state for every tensor of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn for_params(params: &NetworkParams) -> Self {
        AdamState {
            t: 0,
            moments: params.entries.iter().map(|(_, p)| Moments::zeros(p.len())).collect(),
        }
    }

    /// Applies one step using the gradients stored on `params`; tensors with
    /// no gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut NetworkParams, s: &AdamSettings) -> Result<()> {
        self.t += 1;
        for ((_, p), mom) in params.entries.iter_mut().zip(&mut self.moments) {
            let grad = p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
            adam_update(p.values_mut(), &grad, mom, s, self.t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: AdamSettings = AdamSettings {
        lr: 0.01,
        beta1: 0.5,
        beta2: 0.999,
        eps: ADAM_EPS,
    };

    #[test]
    fn zero_grad_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut m = Moments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &S, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_the_gradient() {
        // At t = 1 the bias-corrected moments are g and g², so the step is
        // lr·g/(|g| + eps).
        let grads = [3.0, -0.02, 1e-3];
        let mut p = vec![0.0; 3];
        let mut m = Moments::zeros(3);
        adam_update(&mut p, &grads, &mut m, &S, 1).unwrap();
        for (pi, g) in p.iter().zip(grads) {
            let expected = -S.lr * g / (g.abs() + ADAM_EPS);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi.abs() - S.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        // Scalar simulation: the parameter must fall every step.
        let mut p = vec![1.0];
        let mut m = Moments::zeros(1);
        let mut prev = p[0];
        for t in 1..=200 {
            adam_update(&mut p, &[0.7], &mut m, &S, t).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
        // With a constant gradient each bias-corrected step is exactly ~lr.
        assert!((1.0 - p[0] - 200.0 * S.lr).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        assert!(adam_update(&mut p, &[1.0], &mut m, &S, 0).is_err());
        assert!(matches!(
            adam_update(&mut p, &[f64::INFINITY], &mut m, &S, 1),
            Err(Error::NonFinite(_))
        ));
        assert!(adam_update(&mut p, &[1.0, 2.0], &mut m, &S, 1).is_err());
    }
}

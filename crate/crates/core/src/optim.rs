//! Update rules. Every rule ascends the log posterior, so all of them take
//! the gradient produced by [`crate::nn::log_posterior_grad`] unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Seeded standard-normal stream.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: Option<ChaCha8Rng>,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// A source that only ever yields `0.0`.
    pub fn silent() -> Self {
        Self { rng: None }
    }

    pub fn is_silent(&self) -> bool {
        self.rng.is_none()
    }

    pub fn standard_normal(&mut self) -> f64 {
        match &mut self.rng {
            Some(rng) => StandardNormal.sample(rng),
            None => 0.0,
        }
    }

    /// Derive an independent source, e.g. one per ensemble member.
    pub fn fork(&mut self) -> Self {
        match &mut self.rng {
            Some(rng) => Self {
                rng: Some(ChaCha8Rng::from_rng(rng)),
            },
            None => Self::silent(),
        }
    }

    pub fn rng_mut(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }
}

/// Polynomially annealed SGLD step size `a * (b + t)^(-gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgldSchedule {
    pub base_rate: f64,
    pub offset: f64,
    pub decay: f64,
    pub step: u64,
}

impl Default for SgldSchedule {
    fn default() -> Self {
        Self {
            base_rate: 0.005,
            offset: 1.0,
            decay: 0.55,
            step: 0,
        }
    }
}

impl SgldSchedule {
    pub fn new(base_rate: f64, offset: f64, decay: f64) -> Result<Self> {
        let s = Self {
            base_rate,
            offset,
            decay,
            step: 0,
        };
        s.validate()?;
        Ok(s)
    }

    /// Accepts `base_rate == 0` (a frozen sampler); everything else must
    /// satisfy the Robbins-Monro conditions, which for this family reduce to
    /// `0.5 < gamma <= 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return Err(Error::Config(format!("SGLD base rate must be >= 0, got {}", self.base_rate)));
        }
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return Err(Error::Config(format!("SGLD offset must be > 0, got {}", self.offset)));
        }
        if !(self.decay > 0.5 && self.decay <= 1.0) {
            return Err(Error::Config(format!("SGLD decay must lie in (0.5, 1], got {}", self.decay)));
        }
        Ok(())
    }

    pub fn rate_at(&self, step: u64) -> f64 {
        self.base_rate * (self.offset + step as f64).powf(-self.decay)
    }

    pub fn current_rate(&self) -> f64 {
        self.rate_at(self.step)
    }
}

fn check_grad(params: &ParamVector, grad: &ParamVector) -> Result<()> {
    grad.check_len(params.len())?;
    match grad.first_non_finite() {
        Some(index) => Err(Error::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

/// `w <- w + rate * grad`.
pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, rate: f64) -> Result<()> {
    check_grad(params, grad)?;
    for (w, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *w += rate * g;
    }
    Ok(())
}

/// `w <- w + (eps/2) * grad + N(0, eps)`, then advance the schedule.
pub fn sgld_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    schedule: &mut SgldSchedule,
    noise: &mut NoiseSource,
) -> Result<()> {
    check_grad(params, grad)?;
    schedule.validate()?;
    let eps = schedule.current_rate();
    let half = 0.5 * eps;
    let sd = eps.sqrt();
    for (w, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *w += half * g + sd * noise.standard_normal();
    }
    schedule.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-coordinate adaptive rate of the most recent step.
    pub alpha: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: vec![0.0; len],
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        for got in [self.m.len(), self.v.len(), self.alpha.len()] {
            if got != len {
                return Err(Error::LengthMismatch { expected: len, got });
            }
        }
        Ok(())
    }

    /// Advance moments and refresh `alpha`; returns nothing, the caller
    /// applies `alpha * m`.
    fn advance(&mut self, grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let correction = self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for (((m, v), a), &g) in self.m.iter_mut().zip(&mut self.v).zip(&mut self.alpha).zip(grad) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *a = correction / (v.sqrt() + self.eps);
        }
    }
}

pub fn adam_step(params: &mut ParamVector, grad: &ParamVector, state: &mut AdamState) -> Result<()> {
    noisy_adam_step(params, grad, state, &mut NoiseSource::silent())
}

/// Adam update plus per-coordinate Gaussian noise whose standard deviation
/// is that coordinate's adaptive rate.
pub fn noisy_adam_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    state: &mut AdamState,
    noise: &mut NoiseSource,
) -> Result<()> {
    check_grad(params, grad)?;
    state.check(params.len())?;
    state.advance(grad.as_slice());
    for ((w, m), a) in params.as_mut_slice().iter_mut().zip(&state.m).zip(&state.alpha) {
        *w += a * m + a * noise.standard_normal();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn sgd_basics() {
        let mut w = pv(&[1.0, -2.0, 3.5]);
        let g = pv(&[-1.0, 2.0, -3.5]);
        let orig = w.clone();
        sgd_step(&mut w, &g, 0.0).unwrap();
        assert_eq!(w, orig);
        sgd_step(&mut w, &g, 1.0).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sgd_linear_in_fixed_grads() {
        let g1 = pv(&[0.5, -0.25]);
        let g2 = pv(&[1.0, 4.0]);
        let mut a = pv(&[1.0, 1.0]);
        sgd_step(&mut a, &g1, 0.1).unwrap();
        sgd_step(&mut a, &g2, 0.1).unwrap();
        let mut b = pv(&[1.0, 1.0]);
        sgd_step(&mut b, &pv(&[1.5, 3.75]), 0.1).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_grad_refused() {
        let mut w = pv(&[1.0, 2.0]);
        let g = pv(&[0.0, f64::INFINITY]);
        assert!(matches!(sgd_step(&mut w, &g, 0.1), Err(Error::NonFiniteGradient { index: 1 })));
        let mut s = SgldSchedule::default();
        assert!(sgld_step(&mut w, &g, &mut s, &mut NoiseSource::new(0)).is_err());
        assert_eq!(s.step, 0);
        let mut st = AdamState::new(2, 0.01);
        assert!(adam_step(&mut w, &g, &mut st).is_err());
        assert_eq!(w.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn schedule_validation_and_monotonicity() {
        assert!(SgldSchedule::new(0.005, 1.0, 0.5).is_err());
        assert!(SgldSchedule::new(0.005, 1.0, 1.01).is_err());
        assert!(SgldSchedule::new(0.005, 0.0, 0.55).is_err());
        assert!(SgldSchedule::new(-1.0, 1.0, 0.55).is_err());
        let s = SgldSchedule::new(0.005, 1.0, 1.0).unwrap();
        assert_relative_eq!(s.rate_at(0), 0.005);
        let d = SgldSchedule::default();
        assert!((0..1000).all(|t| d.rate_at(t + 1) < d.rate_at(t)));
    }

    #[test]
    fn sgld_zero_rate_is_frozen() {
        let mut w = pv(&[0.3, -0.7]);
        let mut s = SgldSchedule {
            base_rate: 0.0,
            ..Default::default()
        };
        sgld_step(&mut w, &pv(&[5.0, 5.0]), &mut s, &mut NoiseSource::new(3)).unwrap();
        assert_eq!(w.as_slice(), &[0.3, -0.7]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn sgld_without_noise_is_half_rate_sgd() {
        let g = pv(&[0.25, -1.5, 3.0]);
        let mut s = SgldSchedule {
            step: 17,
            ..Default::default()
        };
        let eps = s.current_rate();
        let mut a = pv(&[1.0, 2.0, 3.0]);
        let mut b = a.clone();
        sgld_step(&mut a, &g, &mut s, &mut NoiseSource::silent()).unwrap();
        sgd_step(&mut b, &g, eps / 2.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.step, 18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.7, -42.0] {
            let mut w = pv(&[0.0; 4]);
            let mut st = AdamState::new(4, 0.005);
            adam_step(&mut w, &pv(&[g; 4]), &mut st).unwrap();
            // m1 / sqrt(v1) = g / (sqrt(1 - beta2) |g| + delta)
            let delta_effect = 1e-8 / ((1.0f64 - 0.999).sqrt() * g.abs());
            for x in w.as_slice() {
                assert_relative_eq!(*x, 0.005 * g.signum(), max_relative = 1.01 * delta_effect);
            }
        }
    }

    #[test]
    fn adam_zero_grad_zero_update() {
        let mut w = pv(&[1.0, -1.0]);
        let mut st = AdamState::new(2, 0.005);
        adam_step(&mut w, &pv(&[0.0, 0.0]), &mut st).unwrap();
        assert_eq!(w.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn adam_step_one_scale_invariant() {
        let g = [0.3, -0.02, 1.7];
        let mut a = pv(&[0.0; 3]);
        let mut b = pv(&[0.0; 3]);
        adam_step(&mut a, &pv(&g), &mut AdamState::new(3, 0.005)).unwrap();
        let g10: Vec<f64> = g.iter().map(|x| 10.0 * x).collect();
        adam_step(&mut b, &pv(&g10), &mut AdamState::new(3, 0.005)).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            // smallest |g| is 0.02, so delta shifts the step by < 2e-5
            assert_relative_eq!(x, y, max_relative = 2e-5);
        }
    }

    #[test]
    fn adam_state_size_checked() {
        let mut w = pv(&[0.0; 3]);
        assert!(adam_step(&mut w, &pv(&[1.0; 3]), &mut AdamState::new(2, 0.005)).is_err());
    }

    #[test]
    fn noisy_adam_silent_equals_adam() {
        let grads = [pv(&[0.1, -0.4]), pv(&[2.0, 0.3]), pv(&[-1.0, 0.0])];
        let mut a = pv(&[0.5, 0.5]);
        let mut b = a.clone();
        let mut sa = AdamState::new(2, 0.005);
        let mut sb = sa.clone();
        for g in &grads {
            adam_step(&mut a, g, &mut sa).unwrap();
            noisy_adam_step(&mut b, g, &mut sb, &mut NoiseSource::silent()).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn noisy_adam_reproducible() {
        let run = || {
            let mut w = pv(&[0.0; 5]);
            let mut st = AdamState::new(5, 0.005);
            let mut noise = NoiseSource::new(77);
            for k in 0..20 {
                let g = pv(&[k as f64 * 0.1, -1.0, 0.5, 2.0, -0.3]);
                noisy_adam_step(&mut w, &g, &mut st, &mut noise).unwrap();
            }
            w
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fork_yields_distinct_streams() {
        let mut root = NoiseSource::new(1);
        let mut a = root.fork();
        let mut b = root.fork();
        assert_ne!(a.standard_normal(), b.standard_normal());
        assert!(NoiseSource::silent().fork().is_silent());
    }
}

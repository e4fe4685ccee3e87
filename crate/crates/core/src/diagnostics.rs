//! Self-checks exposed through the CLI: finite-difference gradient check and
//! an SGLD run on a conjugate Gaussian model with a closed-form posterior.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_params, log_posterior, log_posterior_grad, Batch, NetworkShape, ParamVector};
use crate::optim::{sgld_step, NoiseSource, SgldSchedule};

/// Gradient entries smaller than this are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub shape: String,
    pub samples: usize,
    pub step: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compare the analytic gradient against central differences on a random
/// network and batch.
pub fn gradient_check(shape: &NetworkShape, samples: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::Validation("gradient check needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(shape, seed);
    for b in params.as_mut_slice() {
        // jitter every entry so biases are non-zero too
        *b += 0.1 * rng.random_range(-1.0..1.0);
    }
    let inputs = Array2::from_shape_simple_fn((samples, shape.input_dim), || rng.random::<f64>());
    let labels = (0..samples).map(|_| rng.random_range(0..shape.output_dim)).collect();
    let batch = Batch::new(inputs, labels)?;
    let total = 4 * samples;
    let prior = 1.0;

    let analytic = log_posterior_grad(shape, &params, &batch, total, prior)?.grad;
    let mut worst = (0.0, 0);
    for i in 0..params.len() {
        let orig = params.as_slice()[i];
        params.as_mut_slice()[i] = orig + step;
        let up = log_posterior(shape, &params, &batch, total, prior)?;
        params.as_mut_slice()[i] = orig - step;
        let down = log_posterior(shape, &params, &batch, total, prior)?;
        params.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.as_slice()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRADCHECK_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        shape: shape.to_string(),
        samples,
        step,
        max_rel_error: worst.0,
        worst_index: worst.1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleCheckConfig {
    pub observations: usize,
    pub true_mean: f64,
    pub noise_std: f64,
    pub steps: usize,
    pub schedule: SgldSchedule,
    pub seed: u64,
}

impl Default for SampleCheckConfig {
    fn default() -> Self {
        Self {
            observations: 100,
            true_mean: 1.5,
            noise_std: 1.0,
            steps: 50_000,
            // rate stays near 1e-3..1e-4 so the chain mixes over many
            // relaxation times within the step budget
            schedule: SgldSchedule {
                base_rate: 0.045,
                offset: 1000.0,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleCheckReport {
    pub posterior_mean: f64,
    pub posterior_var: f64,
    pub trajectory_mean: f64,
    pub trajectory_var: f64,
    /// Batch-means Monte-Carlo standard error of the trajectory mean.
    pub mc_standard_error: f64,
}

impl SampleCheckReport {
    pub fn mean_ok(&self) -> bool {
        (self.trajectory_mean - self.posterior_mean).abs() <= 3.0 * self.mc_standard_error
    }

    pub fn var_ok(&self) -> bool {
        (self.trajectory_var / self.posterior_var - 1.0).abs() <= 0.25
    }
}

/// Full-batch SGLD on `x_i ~ N(theta, s^2)` with prior `theta ~ N(0, 1)`.
pub fn conjugate_gaussian_check(cfg: &SampleCheckConfig) -> Result<SampleCheckReport> {
    if cfg.steps < 100 || cfg.observations == 0 {
        return Err(Error::Config("sample check needs >= 100 steps and >= 1 observation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(cfg.true_mean, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let xs: Vec<f64> = (0..cfg.observations).map(|_| normal.sample(&mut rng)).collect();
    let inv_var = 1.0 / (cfg.noise_std * cfg.noise_std);
    let sum: f64 = xs.iter().sum();
    let precision = 1.0 + cfg.observations as f64 * inv_var;

    let mut theta = ParamVector::zeros(1);
    let mut schedule = cfg.schedule;
    let mut noise = NoiseSource::new(crate::train::derive_seed(cfg.seed, 5));
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let t = theta.as_slice()[0];
        let grad = ParamVector::from_vec(vec![-t + inv_var * (sum - cfg.observations as f64 * t)]);
        sgld_step(&mut theta, &grad, &mut schedule, &mut noise)?;
        trajectory.push(theta.as_slice()[0]);
    }

    let n = trajectory.len() as f64;
    let mean = trajectory.iter().sum::<f64>() / n;
    let var = trajectory.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let batches = 50;
    let per = trajectory.len() / batches;
    let means: Vec<f64> = trajectory
        .chunks_exact(per)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / per as f64)
        .collect();
    let bm = means.iter().sum::<f64>() / batches as f64;
    let bvar = means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (batches as f64 - 1.0);

    Ok(SampleCheckReport {
        posterior_mean: inv_var * sum / precision,
        posterior_var: 1.0 / precision,
        trajectory_mean: mean,
        trajectory_var: var,
        mc_standard_error: (bvar / batches as f64).sqrt(),
    })
}

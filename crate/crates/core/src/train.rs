//! Single-network training loops, optionally sketching the iterate stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{next_batch, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::nn::{init_params, HiddenMasks, Mlp, NetworkShape, ParamVector};
use crate::optim::{adam_step, noisy_adam_step, sgd_step, sgld_step, AdamState, NoiseSource, SgldSchedule};
use crate::posterior::{GaussianPosterior, WelfordAccumulator};

/// Update rule applied each step.
///
/// `Sgd` follows the same annealed schedule as `Sgld` at rate `eps_t / 2`,
/// i.e. it is SGLD with the noise switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum UpdateRule {
    Sgd { schedule: SgldSchedule },
    Sgld { schedule: SgldSchedule },
    Adam { lr: f64 },
    NoisyAdam { lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub shape: NetworkShape,
    pub steps: usize,
    pub batch_size: usize,
    pub prior_precision: f64,
    pub rule: UpdateRule,
    /// Dropout on hidden units during training.
    pub dropout_rate: Option<f64>,
    /// Accumulate the post-update iterates into a Gaussian sketch.
    pub sketch: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub posterior: Option<GaussianPosterior>,
    /// Iterates pushed into the sketch.
    pub samples: u64,
    /// Parameter-sized arrays kept alive across steps by the loop (weights,
    /// sketch moments, optimizer moments); per-step gradients excluded.
    pub persistent_arrays: usize,
    pub last_batch_accuracy: f64,
    pub last_batch_nll: f64,
}

/// Independent sub-seeds for one training run.
#[derive(Debug, Clone, Copy)]
struct RunSeeds {
    init: u64,
    batches: u64,
    noise: u64,
    dropout: u64,
}

impl RunSeeds {
    fn new(seed: u64) -> Self {
        Self {
            init: derive_seed(seed, 1),
            batches: derive_seed(seed, 2),
            noise: derive_seed(seed, 3),
            dropout: derive_seed(seed, 4),
        }
    }
}

/// SplitMix64 mix of `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct LoopState {
    params: ParamVector,
    sketch: Option<WelfordAccumulator>,
    adam: Option<AdamState>,
}

impl LoopState {
    fn persistent_arrays(&self) -> usize {
        1 + self.sketch.as_ref().map_or(0, |_| WelfordAccumulator::ARRAYS)
            + self.adam.as_ref().map_or(0, |_| 3)
    }
}

pub fn train(data: &Dataset, spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.shape.validate()?;
    if spec.steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if data.feature_dim() != spec.shape.input_dim {
        return Err(Error::Shape(format!(
            "dataset {} has {} features, network {} expects {}",
            data.name,
            data.feature_dim(),
            spec.shape,
            spec.shape.input_dim
        )));
    }
    if let Some(rate) = spec.dropout_rate {
        crate::ensemble::check_dropout_rate(rate)?;
    }
    if let UpdateRule::Sgd { schedule } | UpdateRule::Sgld { schedule } = &spec.rule {
        schedule.validate()?;
    }

    let seeds = RunSeeds::new(spec.seed);
    let total = data.len();
    let mut plan = BatchPlan::new(total, spec.batch_size, seeds.batches)?;
    let mut noise = NoiseSource::new(seeds.noise);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.dropout);

    let params = init_params(&spec.shape, seeds.init);
    let len = params.len();
    let mut state = LoopState {
        params,
        sketch: spec.sketch.then(|| WelfordAccumulator::new(len)),
        adam: match spec.rule {
            UpdateRule::Adam { lr } | UpdateRule::NoisyAdam { lr } => Some(AdamState::new(len, lr)),
            _ => None,
        },
    };
    let mut schedule = match spec.rule {
        UpdateRule::Sgd { schedule } | UpdateRule::Sgld { schedule } => Some(schedule),
        _ => None,
    };

    let mut last = (0.0, 0.0);
    for step in 0..spec.steps {
        let batch = next_batch(data, &mut plan)?;
        let masks = spec
            .dropout_rate
            .map(|r| HiddenMasks::sample(&spec.shape, batch.len(), r, &mut dropout_rng));
        let out = Mlp::new(&spec.shape, &state.params)?.log_posterior_grad(
            &batch,
            total,
            spec.prior_precision,
            masks.as_ref(),
        )?;
        last = (out.accuracy, out.mean_nll);

        let params = &mut state.params;
        let result = match spec.rule {
            UpdateRule::Sgd { .. } => {
                let s = schedule.as_mut().expect("schedule for sgd");
                let rate = 0.5 * s.current_rate();
                s.step += 1;
                sgd_step(params, &out.grad, rate)
            }
            UpdateRule::Sgld { .. } => sgld_step(params, &out.grad, schedule.as_mut().expect("schedule for sgld"), &mut noise),
            UpdateRule::Adam { .. } => adam_step(params, &out.grad, state.adam.as_mut().expect("adam state")),
            UpdateRule::NoisyAdam { .. } => {
                noisy_adam_step(params, &out.grad, state.adam.as_mut().expect("adam state"), &mut noise)
            }
        };
        result.map_err(|e| Error::Validation(format!("step {step}: {e}")))?;

        if let Some(acc) = state.sketch.as_mut() {
            acc.push(&state.params)
                .map_err(|e| Error::Validation(format!("step {step}: {e}")))?;
        }
    }

    let persistent_arrays = state.persistent_arrays();
    let (samples, posterior) = match &state.sketch {
        Some(acc) => (acc.count(), Some(acc.finalize()?)),
        None => (0, None),
    };
    Ok(TrainOutcome {
        params: state.params,
        posterior,
        samples,
        persistent_arrays,
        last_batch_accuracy: last.0,
        last_batch_nll: last.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn spec(rule: UpdateRule, sketch: bool, steps: usize) -> TrainSpec {
        TrainSpec {
            shape: NetworkShape::new(784, vec![16], 10).unwrap(),
            steps,
            batch_size: 20,
            prior_precision: 1.0,
            rule,
            dropout_rate: None,
            sketch,
            seed: 3,
        }
    }

    #[test]
    fn sgld_sketch_counts_every_step() {
        let data = synth_dataset(200, 1).unwrap();
        let schedule = SgldSchedule {
            base_rate: 2.0 * 0.005 / 200.0,
            ..Default::default()
        };
        let out = train(&data, &spec(UpdateRule::Sgld { schedule }, true, 12)).unwrap();
        assert_eq!(out.samples, 12);
        assert_eq!(out.persistent_arrays, 3);
        assert!(out.posterior.unwrap().sigma2.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let data = synth_dataset(100, 2).unwrap();
        let mut s = spec(UpdateRule::NoisyAdam { lr: 0.005 }, true, 5);
        s.dropout_rate = Some(0.5);
        let a = train(&data, &s).unwrap();
        let b = train(&data, &s).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.posterior, b.posterior);
        s.seed = 4;
        assert_ne!(train(&data, &s).unwrap().params, a.params);
    }

    #[test]
    fn adam_learns_synthetic_classes() {
        let data = synth_dataset(400, 5).unwrap();
        let out = train(&data, &spec(UpdateRule::Adam { lr: 0.005 }, false, 60)).unwrap();
        assert!(out.last_batch_accuracy > 0.9, "{}", out.last_batch_accuracy);
        assert!(out.posterior.is_none());
    }

    #[test]
    fn rejects_mismatched_data() {
        let data = synth_dataset(50, 1).unwrap();
        let mut s = spec(UpdateRule::Adam { lr: 0.01 }, false, 1);
        s.shape = NetworkShape::new(10, vec![4], 10).unwrap();
        assert!(matches!(train(&data, &s), Err(Error::Shape(_))));
        let mut s = spec(UpdateRule::Adam { lr: 0.01 }, true, 1);
        // one sketch sample cannot be finalized
        assert!(matches!(train(&data, &s), Err(Error::InsufficientSamples { .. })));
        s.steps = 0;
        assert!(train(&data, &s).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|k| derive_seed(7, k)).collect();
        assert_eq!(seeds.len(), 100);
    }
}

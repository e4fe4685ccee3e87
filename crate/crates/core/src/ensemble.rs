//! Test-time ensembles and the statistics computed from their predictions.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{HiddenMasks, Mlp, NetworkShape, ParamVector};
use crate::optim::NoiseSource;
use crate::parallel::Execution;
use crate::posterior::GaussianPosterior;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
enum Members {
    Weights(Vec<ParamVector>),
    /// One parameter vector evaluated under `S` fixed dropout masks.
    Dropout {
        params: ParamVector,
        rate: f64,
        mask_seeds: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    shape: NetworkShape,
    members: Members,
}

impl Ensemble {
    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn size(&self) -> usize {
        match &self.members {
            Members::Weights(ws) => ws.len(),
            Members::Dropout { mask_seeds, .. } => mask_seeds.len(),
        }
    }

    /// The first `k` members.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.size() {
            return Err(Error::Validation(format!(
                "prefix of {k} members from an ensemble of {}",
                self.size()
            )));
        }
        let members = match &self.members {
            Members::Weights(ws) => Members::Weights(ws[..k].to_vec()),
            Members::Dropout {
                params,
                rate,
                mask_seeds,
            } => Members::Dropout {
                params: params.clone(),
                rate: *rate,
                mask_seeds: mask_seeds[..k].to_vec(),
            },
        };
        Ok(Self {
            shape: self.shape.clone(),
            members,
        })
    }

    /// Concrete weights of member `i`; `None` for dropout ensembles.
    pub fn member_params(&self, i: usize) -> Option<&ParamVector> {
        match &self.members {
            Members::Weights(ws) => ws.get(i),
            Members::Dropout { .. } => None,
        }
    }

    /// Hidden-unit masks of dropout member `i`.
    pub fn member_masks(&self, i: usize) -> Option<HiddenMasks> {
        match &self.members {
            Members::Dropout { rate, mask_seeds, .. } => mask_seeds
                .get(i)
                .map(|&s| HiddenMasks::sample(&self.shape, 1, *rate, &mut ChaCha8Rng::seed_from_u64(s))),
            Members::Weights(_) => None,
        }
    }

    /// Evaluate every member on `inputs`, members fanned out by `exec`.
    pub fn predict(&self, inputs: ArrayView2<f64>, exec: Execution) -> Result<PredictionSet> {
        let probs = match &self.members {
            Members::Weights(ws) => exec.try_map(ws.iter().collect(), |w| Mlp::new(&self.shape, w)?.forward(inputs))?,
            Members::Dropout { params, .. } => {
                let mlp = Mlp::new(&self.shape, params)?;
                let idx: Vec<usize> = (0..self.size()).collect();
                exec.try_map(idx, |i| {
                    let masks = self.member_masks(i).expect("index in range");
                    mlp.forward_masked(inputs, Some(&masks))
                })?
            }
        };
        PredictionSet::new(probs)
    }
}

/// Per-member class probabilities and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    members: Vec<Array2<f64>>,
    mean: Array2<f64>,
}

impl PredictionSet {
    pub fn new(members: Vec<Array2<f64>>) -> Result<Self> {
        let mean = predictive_mean(&members)?;
        Ok(Self { members, mean })
    }

    pub fn members(&self) -> &[Array2<f64>] {
        &self.members
    }

    pub fn mean(&self) -> &Array2<f64> {
        &self.mean
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Predictions of the first `k` members, as if the ensemble had size `k`.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.size() {
            return Err(Error::Validation(format!("prefix of {k} from {} members", self.size())));
        }
        Self::new(self.members[..k].to_vec())
    }

    /// Per-sample disagreement, see [`disagreement`].
    pub fn disagreement(&self) -> Vec<f64> {
        disagreement(self)
    }

    /// Fraction of rows whose mean-prediction argmax equals the label.
    pub fn accuracy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.mean.nrows() {
            return Err(Error::LengthMismatch {
                expected: self.mean.nrows(),
                got: labels.len(),
            });
        }
        let correct = self
            .mean
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(row, &y)| crate::nn::argmax(row.view()) == y)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Monte-Carlo predictive distribution `(1/S) sum_s p(y | x, w_s)`.
///
/// Accumulated as offsets from the first member, so identical members give
/// back that member bit for bit.
pub fn predictive_mean(members: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    if let Some(bad) = members.iter().find(|m| m.dim() != first.dim()) {
        return Err(Error::Shape(format!(
            "member predictions {:?} vs {:?}",
            bad.dim(),
            first.dim()
        )));
    }
    let s = members.len() as f64;
    let mut offset = Array2::<f64>::zeros(first.dim());
    for m in &members[1..] {
        Zip::from(&mut offset).and(m).and(first).for_each(|o, &p, &p0| *o += p - p0);
    }
    Ok(Zip::from(first).and(&offset).map_collect(|&p0, &o| p0 + o / s))
}

/// `d_x = sum_s KL(p_s(.|x) || mean(.|x))`, with probabilities floored at
/// [`PROB_FLOOR`].
pub fn disagreement(pred: &PredictionSet) -> Vec<f64> {
    let log_mean = pred.mean.mapv(|p| p.max(PROB_FLOOR).ln());
    let mut d = vec![0.0; pred.mean.nrows()];
    for member in &pred.members {
        for ((row, lm), out) in member.axis_iter(Axis(0)).zip(log_mean.axis_iter(Axis(0))).zip(&mut d) {
            let kl: f64 = row
                .iter()
                .zip(lm)
                .map(|(&p, &lq)| {
                    let p = p.max(PROB_FLOOR);
                    p * (p.ln() - lq)
                })
                .sum();
            *out += kl.max(0.0);
        }
    }
    d
}

/// `size` independent draws from the posterior; draw `i` is the same for
/// every `size > i` given the seed.
pub fn build_variational_ensemble(
    shape: &NetworkShape,
    posterior: &GaussianPosterior,
    size: usize,
    seed: u64,
) -> Result<Ensemble> {
    check_size(size)?;
    if posterior.len() != shape.param_count() {
        return Err(Error::LengthMismatch {
            expected: shape.param_count(),
            got: posterior.len(),
        });
    }
    let mut noise = NoiseSource::new(seed);
    let members = (0..size).map(|_| posterior.sample(&mut noise)).collect();
    Ok(Ensemble {
        shape: shape.clone(),
        members: Members::Weights(members),
    })
}

/// Dropout-MC ensemble: `size` thinned copies of one network. Each member
/// drops every hidden unit with probability `rate` and rescales survivors by
/// `1 / (1 - rate)`; the input layer is never dropped.
pub fn build_dropout_ensemble(
    shape: &NetworkShape,
    params: ParamVector,
    size: usize,
    rate: f64,
    seed: u64,
) -> Result<Ensemble> {
    check_size(size)?;
    check_dropout_rate(rate)?;
    params.check_len(shape.param_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask_seeds = (0..size).map(|_| rng.random()).collect();
    Ok(Ensemble {
        shape: shape.clone(),
        members: Members::Dropout {
            params,
            rate,
            mask_seeds,
        },
    })
}

/// Ensemble of independently trained networks.
pub fn build_standard_ensemble(shape: &NetworkShape, members: Vec<ParamVector>) -> Result<Ensemble> {
    check_size(members.len())?;
    for m in &members {
        m.check_len(shape.param_count())
            .map_err(|_| Error::Shape(format!("member with {} parameters does not fit {shape}", m.len())))?;
    }
    Ok(Ensemble {
        shape: shape.clone(),
        members: Members::Weights(members),
    })
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::EmptyEnsemble);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn set(members: Vec<Array2<f64>>) -> PredictionSet {
        PredictionSet::new(members).unwrap()
    }

    #[test]
    fn mean_of_single_member_is_identity() {
        let p = array![[0.3, 0.7], [0.1, 0.9]];
        assert_eq!(set(vec![p.clone()]).mean(), &p);
    }

    #[test]
    fn mean_of_two() {
        let ps = set(vec![array![[0.2, 0.8]], array![[0.6, 0.4]]]);
        assert_relative_eq!(ps.mean()[[0, 0]], 0.4, epsilon = 1e-15);
        assert_relative_eq!(ps.mean()[[0, 1]], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn identical_members() {
        let p = array![[0.123, 0.456, 0.421]];
        let ps = set(vec![p.clone(); 7]);
        assert_eq!(ps.mean(), &p);
        assert_eq!(ps.disagreement(), vec![0.0]);
    }

    #[test]
    fn empty_and_ragged_rejected() {
        assert!(matches!(predictive_mean(&[]), Err(Error::EmptyEnsemble)));
        assert!(predictive_mean(&[array![[1.0]], array![[0.5, 0.5]]]).is_err());
    }

    #[test]
    fn two_member_disagreement_matches_hand_kl() {
        let ps = set(vec![array![[0.9, 0.1]], array![[0.1, 0.9]]]);
        let one = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert_relative_eq!(ps.disagreement()[0], 2.0 * one, max_relative = 1e-12);
        assert_relative_eq!(ps.disagreement()[0], 0.736_128, epsilon = 1e-6);
    }

    #[test]
    fn duplicating_members_doubles_disagreement() {
        let ms = vec![array![[0.7, 0.2, 0.1]], array![[0.1, 0.1, 0.8]], array![[0.3, 0.3, 0.4]]];
        let d1 = set(ms.clone()).disagreement()[0];
        let d2 = set([ms.clone(), ms].concat()).disagreement()[0];
        assert_relative_eq!(d2, 2.0 * d1, max_relative = 1e-12);
    }

    #[test]
    fn zero_probabilities_are_floored() {
        let d = set(vec![array![[1.0, 0.0]], array![[0.0, 1.0]]]).disagreement();
        assert!(d[0].is_finite() && d[0] > 0.0);
    }

    #[test]
    fn accuracy_uses_mean_argmax() {
        let ps = set(vec![array![[0.9, 0.1], [0.4, 0.6]], array![[0.2, 0.8], [0.4, 0.6]]]);
        assert_eq!(ps.accuracy(&[0, 1]).unwrap(), 1.0);
        assert_eq!(ps.accuracy(&[1, 1]).unwrap(), 0.5);
    }

    fn tiny() -> (NetworkShape, ParamVector, Array2<f64>) {
        let shape = NetworkShape::new(3, vec![6, 5], 3).unwrap();
        let params = init_params(&shape, 11);
        let x = array![[0.1, 0.5, 0.9], [0.8, 0.3, 0.0], [0.4, 0.4, 0.4]];
        (shape, params, x)
    }

    #[test]
    fn zero_variance_posterior_ensemble_agrees() {
        let (shape, params, x) = tiny();
        let post = GaussianPosterior::new(params.clone().into_vec(), vec![0.0; params.len()]).unwrap();
        let ens = build_variational_ensemble(&shape, &post, 4, 1).unwrap();
        for i in 0..4 {
            assert_eq!(ens.member_params(i), Some(&params));
        }
        let pred = ens.predict(x.view(), Execution::Sequential).unwrap();
        assert!(pred.disagreement().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn variational_prefix_stable() {
        let (shape, params, _) = tiny();
        let post = GaussianPosterior::new(params.into_vec(), vec![0.01; shape.param_count()]).unwrap();
        let one = build_variational_ensemble(&shape, &post, 1, 8).unwrap();
        let five = build_variational_ensemble(&shape, &post, 5, 8).unwrap();
        assert_eq!(one.member_params(0), five.member_params(0));
        assert_eq!(five.prefix(1).unwrap(), one);
    }

    #[test]
    fn dropout_rate_zero_matches_deterministic_forward() {
        let (shape, params, x) = tiny();
        let det = Mlp::new(&shape, &params).unwrap().forward(x.view()).unwrap();
        let ens = build_dropout_ensemble(&shape, params, 3, 0.0, 5).unwrap();
        for m in ens.predict(x.view(), Execution::Parallel).unwrap().members() {
            assert_eq!(m, &det);
        }
    }

    #[test]
    fn dropout_masks_reproducible() {
        let (shape, params, x) = tiny();
        let a = build_dropout_ensemble(&shape, params.clone(), 4, 0.5, 5).unwrap();
        let b = build_dropout_ensemble(&shape, params, 4, 0.5, 5).unwrap();
        assert_eq!(a.member_masks(2), b.member_masks(2));
        assert_eq!(
            a.predict(x.view(), Execution::Sequential).unwrap(),
            b.predict(x.view(), Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn dropout_rate_checked() {
        let (shape, params, _) = tiny();
        assert!(build_dropout_ensemble(&shape, params.clone(), 2, 1.0, 0).is_err());
        assert!(build_dropout_ensemble(&shape, params, 2, -0.1, 0).is_err());
    }

    #[test]
    fn standard_ensemble_checks_shapes() {
        let (shape, params, x) = tiny();
        let single = build_standard_ensemble(&shape, vec![params.clone()]).unwrap();
        assert!(single.predict(x.view(), Execution::Sequential).unwrap().disagreement().iter().all(|&d| d == 0.0));
        assert!(build_standard_ensemble(&shape, vec![params, ParamVector::zeros(3)]).is_err());
        assert!(matches!(build_standard_ensemble(&shape, vec![]), Err(Error::EmptyEnsemble)));
    }
}

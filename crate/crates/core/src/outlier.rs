//! Disagreement thresholding and detection scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the acceptance band above the calibration mean, in standard
/// deviations.
pub const THRESHOLD_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisagreementStats {
    pub mean: f64,
    pub std: f64,
    pub batch_size: usize,
}

impl DisagreementStats {
    pub fn threshold(&self) -> f64 {
        self.mean + THRESHOLD_SIGMAS * self.std
    }
}

/// Sample mean and Bessel-corrected standard deviation of in-distribution
/// disagreements.
pub fn calibrate(d_train: &[f64]) -> Result<DisagreementStats> {
    if d_train.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            have: d_train.len(),
        });
    }
    if let Some(bad) = d_train.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Validation(format!("disagreement must be finite and >= 0, got {bad}")));
    }
    let n = d_train.len() as f64;
    let mean = d_train.iter().sum::<f64>() / n;
    let var = d_train.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(DisagreementStats {
        mean,
        std: var.sqrt(),
        batch_size: d_train.len(),
    })
}

/// `d_x >= mean + 3 * std`, boundary inclusive.
pub fn is_outlier(d_x: f64, stats: &DisagreementStats) -> bool {
    d_x >= stats.threshold()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub flags: Vec<bool>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// `None` when nothing was flagged.
    pub precision: Option<f64>,
    /// `None` when no true outliers were present.
    pub recall: Option<f64>,
}

/// Confusion counts of `flags` (predicted outlier) against `truth` (is outlier).
pub fn score_detection(flags: &[bool], truth: &[bool]) -> Result<OutlierReport> {
    if flags.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: flags.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&f, &t) in flags.iter().zip(truth) {
        match (f, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(OutlierReport {
        flags: flags.to_vec(),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_calibration() {
        let s = calibrate(&[0.25; 10]).unwrap();
        assert_eq!((s.mean, s.std, s.batch_size), (0.25, 0.0, 10));
    }

    #[test]
    fn zero_two_calibration() {
        let s = calibrate(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_relative_eq!(s.std, 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn calibration_errors() {
        assert!(matches!(calibrate(&[1.0]), Err(Error::InsufficientSamples { .. })));
        assert!(matches!(calibrate(&[0.1, -0.2, 0.3]), Err(Error::Validation(_))));
    }

    #[test]
    fn threshold_boundaries() {
        let s = DisagreementStats {
            mean: 0.1,
            std: 0.02,
            batch_size: 100,
        };
        assert!(is_outlier(0.16, &s));
        assert!(!is_outlier(0.1599, &s));
        let flat = DisagreementStats {
            mean: 0.3,
            std: 0.0,
            batch_size: 2,
        };
        assert!(is_outlier(0.3, &flat));
    }

    #[test]
    fn scoring_counts() {
        let truth: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let mut flags = truth.clone();
        flags.swap(0, 19);
        flags.swap(1, 18);
        let r = score_detection(&flags, &truth).unwrap();
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives, r.true_negatives), (8, 2, 2, 8));
        assert_relative_eq!(r.precision.unwrap(), 0.8);
        assert_relative_eq!(r.recall.unwrap(), 0.8);

        let perfect = score_detection(&truth, &truth).unwrap();
        assert_eq!((perfect.precision, perfect.recall), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn undefined_ratios() {
        let r = score_detection(&[false, false], &[false, false]).unwrap();
        assert_eq!((r.precision, r.recall), (None, None));
        assert!(score_detection(&[true], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_score(mean in 0.0..1.0f64, std in 0.0..1.0f64, a in 0.0..5.0f64, b in 0.0..5.0f64) {
            let s = DisagreementStats { mean, std, batch_size: 2 };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(!is_outlier(lo, &s) || is_outlier(hi, &s));
        }

        #[test]
        fn scale_invariant(
            train in prop::collection::vec(0.0..1.0f64, 2..40),
            x in 0.0..2.0f64,
            log_lambda in -6.0..6.0f64,
        ) {
            let lambda = 2f64.powf(log_lambda.round());
            let s = calibrate(&train).unwrap();
            let scaled: Vec<f64> = train.iter().map(|d| d * lambda).collect();
            let s2 = calibrate(&scaled).unwrap();
            prop_assert_eq!(is_outlier(x, &s), is_outlier(x * lambda, &s2));
        }

        #[test]
        fn counts_partition(pairs in prop::collection::vec(any::<(bool, bool)>(), 0..64)) {
            let (flags, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let r = score_detection(&flags, &truth).unwrap();
            prop_assert_eq!(r.true_positives + r.false_positives + r.true_negatives + r.false_negatives, flags.len());
        }
    }
}

//! Gaussian posterior sketches of SGLD trajectories for neural networks,
//! posterior-sampled ensembles and disagreement-based outlier detection.
//!
//! The pieces, bottom up:
//!
//! * [`nn`]: fully-connected ReLU/softmax classifier over a flat parameter
//!   vector with exact gradients of the minibatch-rescaled log posterior.
//! * [`optim`]: SGD, annealed SGLD, Adam and noisy Adam.
//! * [`posterior`]: Welford sketch of the iterate stream and the resulting
//!   diagonal Gaussian.
//! * [`ensemble`]: posterior-sampled, Dropout-MC and independently trained
//!   ensembles; predictive mean and KL disagreement.
//! * [`outlier`]: threshold calibration and precision/recall scoring.
//! * [`data`]: IDX ingestion, synthetic data, seeded batching.
//! * [`experiment`]: the end-to-end comparison harness and its reports.
//!
//! With the default `parallel` feature, ensemble members and independent
//! training runs fan out over rayon; results are reduced in a fixed order so
//! outputs do not depend on the thread count.

pub mod data;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod outlier;
pub mod parallel;
pub mod posterior;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Batch, NetworkShape, ParamVector};
pub use parallel::Execution;

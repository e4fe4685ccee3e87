//! End-to-end comparison harness: train every method, evaluate accuracy and
//! outlier detection across ensemble sizes, write CSV/JSON reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_idx, synth_dataset, synth_outliers, Dataset};
use crate::ensemble::{build_dropout_ensemble, build_standard_ensemble, build_variational_ensemble, Ensemble};
use crate::error::{Error, Result};
use crate::nn::NetworkShape;
use crate::optim::SgldSchedule;
use crate::outlier::{calibrate, is_outlier, score_detection, DisagreementStats};
use crate::parallel::Execution;
use crate::train::{derive_seed, train, TrainOutcome, TrainSpec, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OursSgld,
    OursNoisyAdam,
    Dropout,
    Standard,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::OursSgld, Method::OursNoisyAdam, Method::Dropout, Method::Standard];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::OursSgld => "ours-sgld",
            Method::OursNoisyAdam => "ours-noisy-adam",
            Method::Dropout => "dropout",
            Method::Standard => "standard",
        }
    }

    pub fn is_ours(self) -> bool {
        matches!(self, Method::OursSgld | Method::OursNoisyAdam)
    }

    /// The optimizer family a method is restricted to, if any.
    pub fn required_arm(self) -> Option<OptimizerArm> {
        match self {
            Method::OursSgld => Some(OptimizerArm::SgldSchedule),
            Method::OursNoisyAdam => Some(OptimizerArm::Adam),
            _ => None,
        }
    }

    fn seed_stream(self) -> u64 {
        match self {
            Method::OursSgld => 11,
            Method::OursNoisyAdam => 12,
            Method::Dropout => 13,
            Method::Standard => 14,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArm {
    SgldSchedule,
    Adam,
}

impl OptimizerArm {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerArm::SgldSchedule => "sgld-schedule",
            OptimizerArm::Adam => "adam",
        }
    }

    pub fn methods(self) -> Vec<Method> {
        match self {
            OptimizerArm::SgldSchedule => vec![Method::OursSgld, Method::Dropout, Method::Standard],
            OptimizerArm::Adam => vec![Method::OursNoisyAdam, Method::Dropout, Method::Standard],
        }
    }
}

impl fmt::Display for OptimizerArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgld-schedule" | "sgld" => Ok(OptimizerArm::SgldSchedule),
            "adam" => Ok(OptimizerArm::Adam),
            _ => Err(Error::Config(format!("unknown optimizer arm {s:?}"))),
        }
    }
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    /// `dir` holds MNIST-style `train-*`/`t10k-*` IDX files. Outliers are the
    /// `t10k-*` files of `outlier_dir` (e.g. notMNIST), or synthetic noise
    /// images when absent.
    Idx {
        dir: PathBuf,
        outlier_dir: Option<PathBuf>,
    },
    Synthetic {
        train: usize,
        test: usize,
        outliers: usize,
        seed: u64,
    },
}

/// Seed of the synthetic outlier set used alongside IDX inliers.
const FALLBACK_OUTLIER_SEED: u64 = 0x0D15_7A11;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub outliers: Dataset,
}

impl DataSource {
    pub fn load(&self) -> Result<LoadedData> {
        match self {
            DataSource::Idx { dir, outlier_dir } => {
                let train = read_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
                let test = read_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
                let outliers = match outlier_dir {
                    Some(o) => read_idx(&o.join(TEST_IMAGES), &o.join(TEST_LABELS))?,
                    None => synth_outliers(test.len(), FALLBACK_OUTLIER_SEED)?,
                };
                Ok(LoadedData { train, test, outliers })
            }
            DataSource::Synthetic {
                train,
                test,
                outliers,
                seed,
            } => Ok(LoadedData {
                train: synth_dataset(*train, derive_seed(*seed, 1))?,
                test: synth_dataset(*test, derive_seed(*seed, 2))?,
                outliers: synth_outliers(*outliers, derive_seed(*seed, 3))?,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arm: OptimizerArm,
    pub methods: Vec<Method>,
    pub sizes: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate on the per-example average log-likelihood.
    pub base_rate: f64,
    pub sgld_offset: f64,
    pub sgld_decay: f64,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub dropout_rate: f64,
    pub prior_precision: f64,
    /// Size of the random training batch used to calibrate the threshold.
    pub calibration_size: usize,
    pub shape: NetworkShape,
}

impl ExperimentConfig {
    /// 1000 steps of batch 100 at rate 0.005, sizes 1/5/10, three seeds.
    pub fn new(arm: OptimizerArm, data: DataSource) -> Self {
        Self {
            arm,
            methods: arm.methods(),
            sizes: vec![1, 5, 10],
            steps: 1000,
            batch_size: 100,
            base_rate: 0.005,
            sgld_offset: 1.0,
            sgld_decay: 0.55,
            seeds: vec![0, 1, 2],
            data,
            dropout_rate: 0.5,
            prior_precision: 1.0,
            calibration_size: 100,
            shape: NetworkShape::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        for m in &self.methods {
            if let Some(arm) = m.required_arm() {
                if arm != self.arm {
                    return Err(Error::Config(format!("method {m} belongs to the {arm} arm, not {}", self.arm)));
                }
            }
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config("ensemble sizes must be non-empty and >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be >= 1".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return Err(Error::Config(format!("base rate must be > 0, got {}", self.base_rate)));
        }
        if !(self.prior_precision > 0.0 && self.prior_precision.is_finite()) {
            return Err(Error::Config("prior precision must be > 0".into()));
        }
        if self.calibration_size < 2 {
            return Err(Error::Config("calibration batch needs at least 2 samples".into()));
        }
        crate::ensemble::check_dropout_rate(self.dropout_rate)?;
        SgldSchedule::new(self.base_rate, self.sgld_offset, self.sgld_decay)?;
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }

    /// SGLD schedule in units of the rescaled log posterior.
    ///
    /// The gradient is `M` times the per-example average, so the per-example
    /// learning rate `base_rate` becomes a posterior step `eps = 2 * base_rate / M`;
    /// the noise-free update `eps/2 * grad` then equals a plain SGD step of
    /// size `base_rate` on the average log-likelihood.
    pub fn sgld_schedule(&self, train_size: usize) -> SgldSchedule {
        SgldSchedule {
            base_rate: 2.0 * self.base_rate / train_size as f64,
            offset: self.sgld_offset,
            decay: self.sgld_decay,
            step: 0,
        }
    }

    pub fn train_spec(&self, method: Method, train_size: usize, seed: u64) -> TrainSpec {
        let schedule = self.sgld_schedule(train_size);
        let rule = match (method, self.arm) {
            (Method::OursSgld, _) => UpdateRule::Sgld { schedule },
            (Method::OursNoisyAdam, _) => UpdateRule::NoisyAdam { lr: self.base_rate },
            (_, OptimizerArm::SgldSchedule) => UpdateRule::Sgd { schedule },
            (_, OptimizerArm::Adam) => UpdateRule::Adam { lr: self.base_rate },
        };
        TrainSpec {
            shape: self.shape.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            prior_precision: self.prior_precision,
            rule,
            dropout_rate: (method == Method::Dropout).then_some(self.dropout_rate),
            sketch: method.is_ours(),
            seed,
        }
    }
}

/// One (method, ensemble size, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: Method,
    pub size: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub median_d_in: f64,
    pub mean_d_in: f64,
    pub median_d_out: f64,
    pub mean_d_out: f64,
    pub calibration: DisagreementStats,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub method: Method,
    pub seed: u64,
    /// Networks trained for this (method, seed).
    pub runs: usize,
    pub persistent_arrays: usize,
    pub sketch_samples: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub rows: Vec<RunRow>,
    pub trainings: Vec<TrainingRecord>,
}

impl RunReport {
    pub fn rows_for(&self, method: Method, size: usize) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(move |r| r.method == method && r.size == size)
    }

    pub fn mean_accuracy(&self, method: Method, size: usize) -> Option<f64> {
        mean(self.rows_for(method, size).map(|r| r.accuracy))
    }
}

pub fn run_experiment(config: &ExperimentConfig, exec: Execution) -> Result<RunReport> {
    config.validate()?;
    let data = config.data.load()?;
    run_experiment_on(config, &data, exec)
}

#[derive(Debug, Clone, Copy)]
struct Job {
    method: Method,
    seed: u64,
    member: usize,
}

/// Like [`run_experiment`] with already loaded data.
pub fn run_experiment_on(config: &ExperimentConfig, data: &LoadedData, exec: Execution) -> Result<RunReport> {
    config.validate()?;
    let m = data.train.len();

    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        for &method in &config.methods {
            let members = if method == Method::Standard { config.max_size() } else { 1 };
            jobs.extend((0..members).map(|member| Job { method, seed, member }));
        }
    }
    info!("training {} networks ({} arm)", jobs.len(), config.arm);

    let trained: Vec<(Job, TrainOutcome, f64)> = exec.try_map(jobs, |job| {
        let run_seed = derive_seed(derive_seed(job.seed, job.method.seed_stream()), job.member as u64);
        let started = Instant::now();
        let out = train(&data.train, &config.train_spec(job.method, m, run_seed))
            .map_err(|e| Error::Validation(format!("{} seed {} member {}: {e}", job.method, job.seed, job.member)))?;
        Ok::<_, Error>((job, out, started.elapsed().as_secs_f64()))
    })?;

    let mut grouped: BTreeMap<(u64, Method), Vec<(TrainOutcome, f64)>> = BTreeMap::new();
    for (job, out, secs) in trained {
        grouped.entry((job.seed, job.method)).or_default().push((out, secs));
    }

    let mut rows = Vec::new();
    let mut trainings = Vec::new();
    for &seed in &config.seeds {
        for &method in &config.methods {
            let runs = grouped.remove(&(seed, method)).expect("every job trained");
            trainings.push(TrainingRecord {
                method,
                seed,
                runs: runs.len(),
                persistent_arrays: runs[0].0.persistent_arrays,
                sketch_samples: runs[0].0.samples,
                wall_clock_secs: runs.iter().map(|r| r.1).sum(),
            });
            let ensemble_seed = derive_seed(derive_seed(seed, method.seed_stream()), 0xE5);
            let ensemble = match method {
                Method::OursSgld | Method::OursNoisyAdam => {
                    let post = runs[0].0.posterior.as_ref().expect("sketching run has a posterior");
                    build_variational_ensemble(&config.shape, post, config.max_size(), ensemble_seed)?
                }
                Method::Dropout => build_dropout_ensemble(
                    &config.shape,
                    runs[0].0.params.clone(),
                    config.max_size(),
                    config.dropout_rate,
                    ensemble_seed,
                )?,
                Method::Standard => {
                    build_standard_ensemble(&config.shape, runs.into_iter().map(|(o, _)| o.params).collect())?
                }
            };
            let calibration = calibration_indices(data.train.len(), config.calibration_size, seed)?;
            for eval in evaluate_ensemble(&ensemble, data, &calibration, &config.sizes, exec)? {
                info!(
                    "{method} size {} seed {seed}: acc {:.4} median d in {:.3e} out {:.3e}",
                    eval.size, eval.accuracy, eval.median_d_in, eval.median_d_out
                );
                rows.push(RunRow {
                    method,
                    size: eval.size,
                    seed,
                    accuracy: eval.accuracy,
                    median_d_in: eval.median_d_in,
                    mean_d_in: eval.mean_d_in,
                    median_d_out: eval.median_d_out,
                    mean_d_out: eval.mean_d_out,
                    calibration: eval.calibration,
                    precision: eval.precision,
                    recall: eval.recall,
                });
            }
        }
    }
    Ok(RunReport {
        config: config.clone(),
        rows,
        trainings,
    })
}

/// The "random training batch" for threshold calibration.
pub fn calibration_indices(train_size: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size < 2 || size > train_size {
        return Err(Error::Config(format!(
            "calibration batch of {size} from {train_size} training samples"
        )));
    }
    let mut idx: Vec<usize> = (0..train_size).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xCA1)));
    idx.truncate(size);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEval {
    pub size: usize,
    pub accuracy: f64,
    pub median_d_in: f64,
    pub mean_d_in: f64,
    pub median_d_out: f64,
    pub mean_d_out: f64,
    pub calibration: DisagreementStats,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Evaluate prefixes of `ensemble` of each size: test accuracy, disagreement
/// on inliers/outliers, and detection quality with a threshold calibrated on
/// the given training rows.
pub fn evaluate_ensemble(
    ensemble: &Ensemble,
    data: &LoadedData,
    calibration: &[usize],
    sizes: &[usize],
    exec: Execution,
) -> Result<Vec<EnsembleEval>> {
    let n_test = data.test.len();
    let n_out = data.outliers.len();
    let calib_inputs = data.train.batch(calibration).inputs;
    let inputs: Array2<f64> = concatenate(
        Axis(0),
        &[data.test.images.view(), data.outliers.images.view(), calib_inputs.view()],
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let full = ensemble.predict(inputs.view(), exec)?;

    let truth: Vec<bool> = (0..n_test + n_out).map(|i| i >= n_test).collect();
    let mut sorted_sizes = sizes.to_vec();
    sorted_sizes.sort_unstable();
    sorted_sizes.dedup();

    sorted_sizes
        .into_iter()
        .map(|size| {
            let pred = full.prefix(size)?;
            let d = pred.disagreement();
            let (d_in, rest) = d.split_at(n_test);
            let (d_out, d_cal) = rest.split_at(n_out);

            let test_mean = pred.mean().slice(ndarray::s![..n_test, ..]).to_owned();
            let correct = test_mean
                .axis_iter(Axis(0))
                .zip(&data.test.labels)
                .filter(|(row, &y)| crate::nn::argmax(row.view()) == y)
                .count();

            let stats = calibrate(d_cal)?;
            let flags: Vec<bool> = d[..n_test + n_out].iter().map(|&x| is_outlier(x, &stats)).collect();
            let report = score_detection(&flags, &truth)?;
            Ok(EnsembleEval {
                size,
                accuracy: correct as f64 / n_test as f64,
                median_d_in: median(d_in),
                mean_d_in: mean(d_in.iter().copied()).unwrap_or(0.0),
                median_d_out: median(d_out),
                mean_d_out: mean(d_out.iter().copied()).unwrap_or(0.0),
                calibration: stats,
                precision: report.precision,
                recall: report.recall,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Bessel-corrected; zero for a single value.
fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_sig6).unwrap_or_default()
}

pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const OUTLIER_CSV: &str = "outlier.csv";
pub const DISAGREEMENT_CSV: &str = "disagreement.csv";
pub const CONFIG_JSON: &str = "config.json";

/// Write `accuracy.csv`, `outlier.csv`, `disagreement.csv` and `config.json`
/// into `out_dir`. Rows are ordered by method (config order) then size;
/// values aggregate over seeds. Undefined precision/recall is left empty.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut sizes = report.config.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();

    let mut acc = vec![vec!["method", "size", "mean", "std"].into_iter().map(String::from).collect::<Vec<_>>()];
    let mut out = vec![vec!["method", "size", "precision", "recall"].into_iter().map(String::from).collect()];
    let mut dis = vec![vec!["method", "size", "median_d_in", "median_d_out"]
        .into_iter()
        .map(String::from)
        .collect()];
    for &method in &report.config.methods {
        for &size in &sizes {
            let rows: Vec<&RunRow> = report.rows_for(method, size).collect();
            let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let key = [method.to_string(), size.to_string()];
            acc.push(
                key.iter()
                    .cloned()
                    .chain([fmt_opt(mean(accs.iter().copied())), fmt_sig6(sample_std(&accs))])
                    .collect(),
            );
            out.push(
                key.iter()
                    .cloned()
                    .chain([
                        fmt_opt(mean(rows.iter().filter_map(|r| r.precision))),
                        fmt_opt(mean(rows.iter().filter_map(|r| r.recall))),
                    ])
                    .collect(),
            );
            dis.push(
                key.iter()
                    .cloned()
                    .chain([
                        fmt_opt(mean(rows.iter().map(|r| r.median_d_in))),
                        fmt_opt(mean(rows.iter().map(|r| r.median_d_out))),
                    ])
                    .collect(),
            );
        }
    }

    let mut written = Vec::new();
    for (name, table) in [(ACCURACY_CSV, acc), (OUTLIER_CSV, out), (DISAGREEMENT_CSV, dis)] {
        let path = out_dir.join(name);
        write_csv(&path, &table)?;
        written.push(path);
    }
    let path = out_dir.join(CONFIG_JSON);
    let json = serde_json::to_string_pretty(&report.config)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    written.push(path);
    Ok(written)
}

fn write_csv(path: &Path, table: &[Vec<String>]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in table {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use sgld_sketch::diagnostics::{conjugate_gaussian_check, gradient_check, SampleCheckConfig};
use sgld_sketch::ensemble::{build_dropout_ensemble, build_standard_ensemble, build_variational_ensemble, Ensemble};
use sgld_sketch::experiment::{
    calibration_indices, emit_report, evaluate_ensemble, fmt_sig6, run_experiment, DataSource, ExperimentConfig, Method,
    OptimizerArm,
};
use sgld_sketch::optim::SgldSchedule;
use sgld_sketch::posterior::{GaussianPosterior, PosteriorSnapshot};
use sgld_sketch::train::{derive_seed, train};
use sgld_sketch::{Execution, NetworkShape, ParamVector};

#[derive(Parser)]
#[command(name = "sgld-sketch", version, about = "Posterior-sketch ensembles and disagreement-based outlier detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method once and save the resulting model.
    Train(TrainArgs),
    /// Evaluate a trained model: accuracy, disagreement, outlier detection.
    Detect(DetectArgs),
    /// Full comparison across methods, sizes and seeds; writes CSV reports.
    Bench(BenchArgs),
    /// Finite-difference check of the log-posterior gradient.
    Gradcheck(GradcheckArgs),
    /// SGLD on a conjugate Gaussian model against its closed-form posterior.
    Samplecheck(SamplecheckArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with train-*/t10k-* IDX files.
    #[arg(long, env = "SGLD_SKETCH_DATA")]
    data_dir: Option<PathBuf>,
    /// Directory with outlier t10k-* IDX files (e.g. notMNIST); synthetic noise if absent.
    #[arg(long)]
    outlier_dir: Option<PathBuf>,
    /// Use the synthetic dataset instead of IDX files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 2000)]
    synth_train: usize,
    #[arg(long, default_value_t = 500)]
    synth_test: usize,
    #[arg(long, default_value_t = 500)]
    synth_outliers: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        if self.synthetic {
            return Ok(DataSource::Synthetic {
                train: self.synth_train,
                test: self.synth_test,
                outliers: self.synth_outliers,
                seed: self.synth_seed,
            });
        }
        match &self.data_dir {
            Some(dir) => Ok(DataSource::Idx {
                dir: dir.clone(),
                outlier_dir: self.outlier_dir.clone(),
            }),
            None => bail!("no data: pass --data-dir (or set SGLD_SKETCH_DATA) or --synthetic"),
        }
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value = "adam", value_parser = parse_arm)]
    arm: OptimizerArm,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Learning rate on the per-example average log-likelihood.
    #[arg(long, default_value_t = 0.005)]
    base_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    sgld_offset: f64,
    #[arg(long, default_value_t = 0.55)]
    sgld_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    prior_precision: f64,
    #[arg(long, default_value_t = 100)]
    calibration_size: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "200,200,200")]
    hidden: Vec<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    data: DataArgs,
}

impl ConfigArgs {
    fn config(&self, methods: Vec<Method>, seeds: Vec<u64>) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::new(self.arm, self.data.source()?);
        c.methods = methods;
        c.seeds = seeds;
        c.sizes = self.sizes.clone();
        c.steps = self.steps;
        c.batch_size = self.batch_size;
        c.base_rate = self.base_rate;
        c.sgld_offset = self.sgld_offset;
        c.sgld_decay = self.sgld_decay;
        c.dropout_rate = self.dropout_rate;
        c.prior_precision = self.prior_precision;
        c.calibration_size = self.calibration_size;
        c.shape = NetworkShape::new(784, self.hidden.clone(), 10)?;
        c.validate()?;
        Ok(c)
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

fn parse_arm(s: &str) -> Result<OptimizerArm, String> {
    s.parse().map_err(|e: sgld_sketch::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: sgld_sketch::Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the model files.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DetectArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Write outlier.csv here as well as printing.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Methods to compare; defaults to every method of the chosen arm.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    input: usize,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    output: usize,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SamplecheckArgs {
    #[arg(long, default_value_t = 50_000)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    observations: usize,
    #[arg(long, default_value_t = 0.045)]
    base_rate: f64,
    #[arg(long, default_value_t = 1000.0)]
    offset: f64,
    #[arg(long, default_value_t = 0.55)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Written next to the model files by `train`.
#[derive(Serialize, Deserialize)]
struct TrainManifest {
    method: Method,
    seed: u64,
    members: usize,
    config: ExperimentConfig,
}

const MANIFEST: &str = "train.json";

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means a check ran but did not pass.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => cmd_train(args).map(|_| true),
        Command::Detect(args) => cmd_detect(args).map(|_| true),
        Command::Bench(args) => cmd_bench(args).map(|_| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Samplecheck(args) => cmd_samplecheck(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.config(vec![args.method], vec![args.seed])?;
    let data = config.data.load().context("loading data")?;
    let members = if args.method == Method::Standard { config.max_size() } else { 1 };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let base = derive_seed(args.seed, 0x7A);
    let runs: Vec<usize> = (0..members).collect();
    let outcomes = args.config.execution().try_map(runs, |k| {
        train(&data.train, &config.train_spec(args.method, data.train.len(), derive_seed(base, k as u64)))
    })?;
    for (k, out) in outcomes.iter().enumerate() {
        info!(
            "{} run {k}: last batch accuracy {:.3}, nll {:.4}",
            args.method, out.last_batch_accuracy, out.last_batch_nll
        );
        let (name, post) = match &out.posterior {
            Some(p) => ("posterior.bin".to_string(), p.clone()),
            None => (format!("member-{k}.bin"), point_mass(&out.params)),
        };
        let path = args.out.join(name);
        PosteriorSnapshot::new(config.shape.clone(), post)?.save(&path)?;
        println!("wrote {}", path.display());
    }
    let manifest = TrainManifest {
        method: args.method,
        seed: args.seed,
        members,
        config,
    };
    std::fs::write(args.out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn point_mass(params: &ParamVector) -> GaussianPosterior {
    GaussianPosterior {
        mu: params.as_slice().to_vec(),
        sigma2: vec![0.0; params.len()],
    }
}

fn load_model(dir: &Path, manifest: &TrainManifest, size: usize) -> Result<Ensemble> {
    let c = &manifest.config;
    let ensemble_seed = derive_seed(manifest.seed, 0xE5);
    let load = |name: &str| PosteriorSnapshot::load(&dir.join(name)).with_context(|| format!("loading {name}"));
    Ok(match manifest.method {
        Method::OursSgld | Method::OursNoisyAdam => {
            let snap = load("posterior.bin")?;
            build_variational_ensemble(&snap.shape, &snap.posterior, size, ensemble_seed)?
        }
        Method::Dropout => {
            let snap = load("member-0.bin")?;
            build_dropout_ensemble(&snap.shape, snap.posterior.mean_params(), size, c.dropout_rate, ensemble_seed)?
        }
        Method::Standard => {
            if size > manifest.members {
                bail!("standard ensemble of {size} requested, only {} members trained", manifest.members);
            }
            let members = (0..size)
                .map(|k| load(&format!("member-{k}.bin")).map(|s| s.posterior.mean_params()))
                .collect::<Result<Vec<_>>>()?;
            build_standard_ensemble(&c.shape, members)?
        }
    })
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let raw = std::fs::read_to_string(args.model.join(MANIFEST))
        .with_context(|| format!("reading {}", args.model.join(MANIFEST).display()))?;
    let manifest: TrainManifest = serde_json::from_str(&raw)?;
    let sizes = args.sizes.unwrap_or_else(|| manifest.config.sizes.clone());
    if sizes.is_empty() || sizes.contains(&0) {
        bail!("ensemble sizes must be >= 1");
    }
    let max = sizes.iter().copied().max().unwrap_or(1);
    let ensemble = load_model(&args.model, &manifest, max)?;
    let data = manifest.config.data.load().context("loading data")?;
    let calib = calibration_indices(data.train.len(), manifest.config.calibration_size, manifest.seed)?;
    let exec = if args.sequential { Execution::Sequential } else { Execution::default() };
    let evals = evaluate_ensemble(&ensemble, &data, &calib, &sizes, exec)?;

    let mut lines = vec!["method,size,accuracy,precision,recall,median_d_in,median_d_out".to_string()];
    for e in &evals {
        let opt = |x: Option<f64>| x.map(fmt_sig6).unwrap_or_default();
        lines.push(format!(
            "{},{},{},{},{},{},{}",
            manifest.method,
            e.size,
            fmt_sig6(e.accuracy),
            opt(e.precision),
            opt(e.recall),
            fmt_sig6(e.median_d_in),
            fmt_sig6(e.median_d_out)
        ));
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("detect.csv"), text)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let methods = args.methods.unwrap_or_else(|| args.config.arm.methods());
    let config = args.config.config(methods, args.seeds)?;
    let report = run_experiment(&config, args.config.execution())?;
    for t in &report.trainings {
        info!(
            "{} seed {}: {} run(s), {:.1}s",
            t.method, t.seed, t.runs, t.wall_clock_secs
        );
    }
    for path in emit_report(&report, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let shape = NetworkShape::new(args.input, args.hidden, args.output)?;
    let r = gradient_check(&shape, args.samples, args.step, args.seed)?;
    let pass = r.max_rel_error < args.tolerance;
    println!(
        "gradcheck {}: {} samples, step {:e}, max relative error {:.3e} (coordinate {}) -> {}",
        r.shape,
        r.samples,
        r.step,
        r.max_rel_error,
        r.worst_index,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn cmd_samplecheck(args: SamplecheckArgs) -> Result<bool> {
    let cfg = SampleCheckConfig {
        observations: args.observations,
        steps: args.steps,
        schedule: SgldSchedule::new(args.base_rate, args.offset, args.decay)?,
        seed: args.seed,
        ..Default::default()
    };
    let r = conjugate_gaussian_check(&cfg)?;
    let pass = r.mean_ok() && r.var_ok();
    println!(
        "samplecheck: posterior N({:.6}, {:.6e}); trajectory mean {:.6} (MC s.e. {:.2e}), variance {:.6e} -> {}",
        r.posterior_mean,
        r.posterior_var,
        r.trajectory_mean,
        r.mc_standard_error,
        r.trajectory_var,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

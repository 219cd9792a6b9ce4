use capsule_routing::dynamics::{self, DynamicsError, SweepOptions};
use capsule_routing::experiments::{
    self, generate_constellation, train_once, ExperimentConfig, ExperimentError,
};
use capsule_routing::network::{
    classifier_agreement_with, evaluate, grad_check, grad_check_fixture, FitReport, InitialScore, NetworkError,
    FD_STEP,
};
use capsule_routing::routing::{route, Algorithm, Family, PredictionTensor, RoutingConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Largest relative error a gradient check may report and still pass.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "capsroute", version, about = "Capsule routing: runs, dynamics, training and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Route a prediction tensor and write the full result as JSON.
    Route(RouteArgs),
    /// Polarization statistics at several iteration counts (CSV).
    Sweep(SweepArgs),
    /// Run to convergence and check the fixed-point condition.
    Steady(SteadyArgs),
    /// Compare analytic gradients with central differences on the fixed toy model.
    GradCheck(GradCheckArgs),
    /// Train one model from an experiment config.
    Train(TrainArgs),
    /// Evaluate a trained model with a different routing algorithm.
    SwapEval(SwapArgs),
    /// Pre-routing vs link-strength classifier breakdown.
    Agreement(AgreementArgs),
    /// Baseline comparison table.
    Q1(TableArgs),
    /// Train-with-routing, evaluate-with-baseline table.
    Q4(TableArgs),
    /// Classifier-agreement timeline over training.
    Fig1(TableArgs),
}

#[derive(Args)]
struct RoutingFlags {
    /// dynamic | em | optim | group | attention | uniform | random
    #[arg(long, default_value = "dynamic")]
    algo: Algorithm,
    /// Family whose composition the uniform/random baselines use.
    #[arg(long)]
    family: Option<Family>,
    /// Inverse temperature (EM default 0.01, optim default 1).
    #[arg(long)]
    lambda: Option<f64>,
    /// EM variance floor.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Seed for random routing.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RoutingFlags {
    fn config(&self, iterations: usize) -> RoutingConfig {
        let mut cfg = RoutingConfig::new(self.algo, iterations).with_seed(self.seed);
        cfg.family = self.family;
        cfg.lambda = self.lambda;
        cfg.epsilon = self.epsilon;
        cfg
    }
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Iterate until the links stop changing instead of a fixed count.
    #[arg(long)]
    converge: bool,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    cap: usize,
    #[command(flatten)]
    routing: RoutingFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated, strictly ascending.
    #[arg(long, value_delimiter = ',', default_value = "1,3,10,100")]
    iters: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value_t = 0.99)]
    threshold: f64,
    #[command(flatten)]
    routing: RoutingFlags,
    /// Per-iteration metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the link-strength histograms as CSV.
    #[arg(long)]
    histogram_out: Option<PathBuf>,
}

#[derive(Args)]
struct SteadyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    cap: usize,
    #[command(flatten)]
    routing: RoutingFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "dynamic")]
    algo: Algorithm,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    iters: Vec<usize>,
    /// Hold link strengths constant in the backward pass.
    #[arg(long)]
    block: bool,
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigFlags {
    /// Experiment config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the dataset (and for training in single-model commands).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ConfigFlags {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json(&read(p)?).map_err(|e| Failure::Config(e.to_string()))?,
            None => ExperimentConfig::default(),
        };
        cfg.dataset.seed = self.seed;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Fit report JSON (includes the model checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    epochs_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SwapArgs {
    /// Fit report written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "uniform")]
    eval_algo: Algorithm,
    /// Iterations for a routed evaluation algorithm.
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[command(flatten)]
    cfg: ConfigFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    NormOfSum,
    SumOfNorms,
}

#[derive(Args)]
struct AgreementArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Use this fit report's model instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "norm-of-sum")]
    score: ScoreArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (overrides the config).
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    /// Bad files, flags or configs: exit 1.
    Usage(String),
    /// A config that does not parse or validate: exit 1 with a schema hint.
    Config(String),
    /// Non-convergence, divergence or a failed check: exit 2.
    Numeric(String),
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::DivergedTraining(_) => Failure::Numeric(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Network(n) => n.into(),
            ExperimentError::TrainingFailed { .. } => Failure::Numeric(e.to_string()),
            ExperimentError::InvalidConfig(m) => Failure::Config(m),
        }
    }
}

impl From<DynamicsError> for Failure {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::NotConverged(_) => Failure::Numeric(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_prediction(path: &Path) -> Result<PredictionTensor, Failure> {
    PredictionTensor::from_json(&read(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_fit(path: &Path) -> Result<FitReport, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialize");
    s.push('\n');
    s
}

/// Writes `text` to `path`, or stdout when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_route(a: &RouteArgs) -> Result<(), Failure> {
    let pred = load_prediction(&a.input)?;
    let mut cfg = a.routing.config(a.iters);
    if a.converge {
        cfg = cfg.converging(a.tol, a.cap);
    }
    let res = route(&pred, &cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    if a.converge && !res.converged {
        return Err(Failure::Numeric(format!("routing did not converge within {} iterations", a.cap)));
    }
    emit(a.out.as_deref(), &json(&res))
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), Failure> {
    let pred = load_prediction(&a.input)?;
    let opts = SweepOptions {
        bins: a.bins,
        threshold: a.threshold,
    };
    let report = dynamics::sweep_with(&pred, &a.routing.config(0), &a.iters, &opts)?;
    let histograms = report.histogram_csv();
    emit(a.out.as_deref(), &report.metrics_csv())?;
    if let Some(p) = &a.histogram_out {
        emit(Some(p), &histograms)?;
    }
    Ok(())
}

fn cmd_steady(a: &SteadyArgs) -> Result<(), Failure> {
    let pred = load_prediction(&a.input)?;
    let cfg = a.routing.config(0).converging(a.tol, a.cap);
    match dynamics::check_steady_state(&pred, &cfg) {
        Ok(report) => emit(a.out.as_deref(), &json(&report)),
        Err(DynamicsError::NotConverged(report)) => {
            // the partial report is still useful for diagnosis
            eprint!("{}", json(&report));
            Err(Failure::Numeric(format!(
                "routing did not converge within {} iterations",
                report.iterations_used
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for &iters in &a.iters {
        let (model, batch, cfg) = grad_check_fixture(a.algo, iters, a.block, a.seed)?;
        reports.push(grad_check(&model, &batch, &cfg, a.step)?);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    emit(a.out.as_deref(), &json(&reports))?;
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("max relative error {worst:e} ≥ {GRAD_TOLERANCE:e}")))
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let data = generate_constellation(&cfg.dataset)?;
    let routing = cfg.routing.clone().with_seed(a.cfg.seed);
    let report = train_once(&cfg, &data, &routing, a.cfg.seed, false)?;
    let csv = report.epochs_csv();
    emit(a.out.as_deref(), &json(&report))?;
    if let Some(p) = &a.epochs_csv {
        emit(Some(p), &csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SwapResult {
    trained_with: RoutingConfig,
    evaluated_with: RoutingConfig,
    routed_accuracy: f64,
    swapped_accuracy: f64,
    samples: usize,
}

fn cmd_swap(a: &SwapArgs) -> Result<(), Failure> {
    let fit = load_fit(&a.model)?;
    let cfg = a.cfg.load()?;
    let data = generate_constellation(&cfg.dataset)?;
    let family = fit.model.shape().family;
    let mut eval = RoutingConfig::new(a.eval_algo, a.iters).with_seed(a.cfg.seed);
    if a.eval_algo.is_baseline() {
        eval.family = Some(family);
    }
    let trained = fit.train.routing.clone();
    let result = SwapResult {
        routed_accuracy: evaluate(&fit.model, &data.eval, &trained)?,
        swapped_accuracy: evaluate(&fit.model, &data.eval, &eval)?,
        trained_with: trained,
        evaluated_with: eval,
        samples: data.eval.len(),
    };
    emit(a.out.as_deref(), &json(&result))
}

fn cmd_agreement(a: &AgreementArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let data = generate_constellation(&cfg.dataset)?;
    let (model, routing) = match &a.model {
        Some(p) => {
            let fit = load_fit(p)?;
            (fit.model, fit.train.routing)
        }
        None => {
            let routing = cfg.routing.clone().with_seed(a.cfg.seed);
            (train_once(&cfg, &data, &routing, a.cfg.seed, false)?.model, routing)
        }
    };
    let score = match a.score {
        ScoreArg::NormOfSum => InitialScore::NormOfSum,
        ScoreArg::SumOfNorms => InitialScore::SumOfNorms,
    };
    let br = classifier_agreement_with(&model, &data.eval, &routing, score)?;
    emit(a.out.as_deref(), &json(&br))
}

fn table_config(a: &TableArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = a.cfg.load()?;
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_dir(dir: &Path, files: &[(&str, String)]) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    for (name, text) in files {
        emit(Some(&dir.join(name)), text)?;
    }
    Ok(())
}

fn cmd_table(a: &TableArgs, which: &str) -> Result<(), Failure> {
    let cfg = table_config(a)?;
    let table = match which {
        "q1" => experiments::run_q1(&cfg)?,
        _ => experiments::run_q4(&cfg)?,
    };
    let rendered = table.render();
    print!("{rendered}");
    write_dir(
        &a.out,
        &[
            (&format!("{which}.csv"), table.to_csv()),
            (&format!("{which}.txt"), rendered),
            (&format!("{which}.json"), json(&table)),
            ("config.json", json(&cfg)),
        ],
    )
}

fn cmd_fig1(a: &TableArgs) -> Result<(), Failure> {
    let cfg = table_config(a)?;
    let report = experiments::run_fig1(&cfg)?;
    write_dir(
        &a.out,
        &[
            ("fig1.csv", report.to_csv()),
            ("fig1.json", json(&report)),
            ("config.json", json(&cfg)),
        ],
    )
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Route(a) => cmd_route(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Steady(a) => cmd_steady(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Train(a) => cmd_train(a),
        Command::SwapEval(a) => cmd_swap(a),
        Command::Agreement(a) => cmd_agreement(a),
        Command::Q1(a) => cmd_table(a, "q1"),
        Command::Q4(a) => cmd_table(a, "q4"),
        Command::Fig1(a) => cmd_fig1(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            eprintln!("\nexpected an experiment config like (every field but schema_version is optional):");
            eprint!("{}", ExperimentConfig::default().to_json());
            eprintln!();
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

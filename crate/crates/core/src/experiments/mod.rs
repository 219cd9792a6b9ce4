//! Desk-scale training protocols: the baseline comparison, the
//! train/evaluate swap and the classifier-agreement timeline.

mod dataset;
mod table;

pub use dataset::{generate_constellation, ConstellationConfig, Dataset};
pub use table::{Cell, ComparisonTable, RunRecord};

use crate::network::{
    evaluate, train, AgreementBreakdown, FitReport, InitScale, LossKind, LrSchedule, ModelShape, NetworkError,
    ToyModel, TrainConfig,
};
use crate::network::mix_seed;
use crate::routing::{Algorithm, Family, RoutingConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

pub const EXPERIMENT_SCHEMA: u32 = 1;

/// A run counts as failed when its final training accuracy is within this
/// margin of chance.
pub const COLLAPSE_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("training failed on both attempts (seed {seed})")]
    TrainingFailed { seed: u64, last: Option<Box<FitReport>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub features: usize,
    pub capsules: usize,
    pub dim: usize,
    pub init: InitScale,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            features: 32,
            capsules: 16,
            dim: 8,
            init: InitScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub loss: LossKind,
    pub block_c_gradient: bool,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            schedule: LrSchedule::Step {
                lr: 0.05,
                every: 20,
                gamma: 0.1,
            },
            momentum: 0.9,
            loss: LossKind::Margin,
            block_c_gradient: false,
            clip_norm: Some(5.0),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_families() -> Vec<Family> {
    Family::ALL.to_vec()
}
fn default_q1_iterations() -> Vec<usize> {
    vec![2, 3, 5, 10]
}
fn default_q4_iterations() -> [usize; 2] {
    [3, 10]
}
fn default_fig1_iterations() -> usize {
    3
}
fn default_jobs() -> usize {
    1
}
fn default_routing() -> RoutingConfig {
    RoutingConfig::new(Algorithm::Dynamic, 3)
}

/// Everything a protocol needs, read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub dataset: ConstellationConfig,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainSettings,
    /// Routing used by single-model commands; the tables override the
    /// algorithm, family and iteration count but keep the other fields.
    #[serde(default = "default_routing")]
    pub routing: RoutingConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_families")]
    pub families: Vec<Family>,
    #[serde(default = "default_q1_iterations")]
    pub q1_iterations: Vec<usize>,
    #[serde(default = "default_q4_iterations")]
    pub q4_iterations: [usize; 2],
    #[serde(default = "default_fig1_iterations")]
    pub fig1_iterations: usize,
    /// Worker threads for table cells.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA,
            dataset: ConstellationConfig::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            routing: default_routing(),
            seeds: default_seeds(),
            families: default_families(),
            q1_iterations: default_q1_iterations(),
            q4_iterations: default_q4_iterations(),
            fig1_iterations: default_fig1_iterations(),
            jobs: default_jobs(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.schema_version != EXPERIMENT_SCHEMA {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        self.dataset.validate()?;
        if self.seeds.is_empty() || self.families.is_empty() || self.q1_iterations.is_empty() {
            return bad("seeds, families and q1_iterations must be nonempty".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.routing.validate().map_err(NetworkError::from)?;
        Ok(())
    }

    pub fn model_shape(&self, family: Family) -> ModelShape {
        ModelShape {
            input_dim: self.dataset.input_dim(),
            features: self.model.features,
            capsules: self.model.capsules,
            dim: self.model.dim,
            classes: self.dataset.classes,
            family,
        }
    }

    /// The routing template specialised to one algorithm. Baselines run a
    /// single pass (their output never depends on the count).
    pub fn routing_for(&self, algorithm: Algorithm, family: Family, iterations: usize, seed: u64) -> RoutingConfig {
        let mut r = self.routing.clone();
        r.algorithm = algorithm;
        r.family = algorithm.is_baseline().then_some(family);
        r.iterations = if algorithm.is_baseline() { 1 } else { iterations };
        r.run_to_convergence = false;
        r.rng_seed = seed;
        // a λ in the template is meant for the template's own family
        if self.routing.effective_family() != family {
            r.lambda = None;
        }
        r
    }

    pub fn train_config(&self, routing: RoutingConfig, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            routing,
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: t.schedule,
            momentum: t.momentum,
            loss: t.loss,
            block_c_gradient: t.block_c_gradient,
            seed,
            clip_norm: t.clip_norm,
            record_agreement: false,
            parallel: false,
        }
    }
}

fn family_index(f: Family) -> u64 {
    Family::ALL.iter().position(|&g| g == f).unwrap_or(0) as u64
}

/// Trains one model; the initial weights depend only on the family and the
/// seed, so every cell of a row starts from the same network.
pub fn train_once(
    cfg: &ExperimentConfig,
    data: &Dataset,
    routing: &RoutingConfig,
    seed: u64,
    record_agreement: bool,
) -> Result<FitReport, NetworkError> {
    let family = routing.effective_family();
    let model = ToyModel::new(
        cfg.model_shape(family),
        routing,
        cfg.model.init,
        mix_seed(&[seed, family_index(family)]),
    )?;
    let mut tc = cfg.train_config(routing.clone(), seed);
    tc.record_agreement = record_agreement;
    train(model, &data.train, &data.eval, &tc)
}

fn collapsed(report: &FitReport, classes: usize) -> bool {
    let acc = report.epochs.last().map(|e| e.train_accuracy).unwrap_or(0.0);
    acc <= 1.0 / classes as f64 + COLLAPSE_MARGIN
}

/// Trains, and restarts once with a shifted seed if training diverges or
/// collapses to chance. Returns the report (if either attempt succeeded) and
/// whether a restart happened.
pub fn train_with_restart(
    cfg: &ExperimentConfig,
    data: &Dataset,
    routing: &RoutingConfig,
    seed: u64,
    record_agreement: bool,
) -> Result<(FitReport, bool), ExperimentError> {
    let mut last = None;
    for (attempt, s) in [seed, mix_seed(&[seed, 0x5245_5354])].into_iter().enumerate() {
        match train_once(cfg, data, routing, s, record_agreement) {
            Ok(r) if !collapsed(&r, cfg.dataset.classes) => return Ok((r, attempt > 0)),
            Ok(r) => last = Some(Box::new(r)),
            Err(NetworkError::DivergedTraining(r)) => last = Some(r),
            Err(e) => return Err(e.into()),
        }
    }
    Err(ExperimentError::TrainingFailed { seed, last })
}

/// One training run and the evaluations made with the trained model.
struct Job {
    family: Family,
    train: RoutingConfig,
    seed: u64,
    evals: Vec<(String, RoutingConfig)>,
}

fn run_job(cfg: &ExperimentConfig, data: &Dataset, job: &Job) -> Result<Vec<(String, RunRecord)>, ExperimentError> {
    let record = |accuracy, restarted| RunRecord {
        seed: job.seed,
        accuracy,
        restarted,
    };
    match train_with_restart(cfg, data, &job.train, job.seed, false) {
        Ok((report, restarted)) => job
            .evals
            .iter()
            .map(|(col, rc)| Ok((col.clone(), record(Some(evaluate(&report.model, &data.eval, rc)?), restarted))))
            .collect(),
        Err(ExperimentError::TrainingFailed { .. }) => {
            Ok(job.evals.iter().map(|(col, _)| (col.clone(), record(None, true))).collect())
        }
        Err(e) => Err(e),
    }
}

fn run_jobs(cfg: &ExperimentConfig, data: &Dataset, jobs: &[Job]) -> Result<Vec<Vec<(String, RunRecord)>>, ExperimentError> {
    let work = |j: &Job| run_job(cfg, data, j);
    if cfg.jobs <= 1 {
        return jobs.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    // collect() keeps job order, so the merge below is order independent
    pool.install(|| jobs.par_iter().map(work).collect())
}

fn assemble(
    title: &str,
    cfg: &ExperimentConfig,
    columns: Vec<String>,
    jobs: &[Job],
    results: Vec<Vec<(String, RunRecord)>>,
) -> ComparisonTable {
    let rows: Vec<String> = cfg.families.iter().map(|f| f.name().to_string()).collect();
    let mut cells: Vec<Cell> = rows
        .iter()
        .flat_map(|r| {
            columns.iter().map(move |c| Cell {
                row: r.clone(),
                column: c.clone(),
                runs: Vec::new(),
            })
        })
        .collect();
    for (job, out) in jobs.iter().zip(results) {
        let r = cfg.families.iter().position(|&f| f == job.family).expect("job family listed");
        for (col, rec) in out {
            let k = columns.iter().position(|c| *c == col).expect("job column listed");
            cells[r * columns.len() + k].runs.push(rec);
        }
    }
    for c in &mut cells {
        c.runs.sort_by_key(|r| r.seed);
    }
    ComparisonTable {
        title: title.to_string(),
        rows,
        columns,
        cells,
    }
}

fn iteration_label(n: usize) -> String {
    format!("{n} iterations")
}

/// Every family trained and evaluated with uniform links, random links and
/// each routing iteration count.
pub fn run_q1(cfg: &ExperimentConfig) -> Result<ComparisonTable, ExperimentError> {
    cfg.validate()?;
    let data = generate_constellation(&cfg.dataset)?;
    let mut columns = vec!["Uniform".to_string(), "Random".to_string()];
    columns.extend(cfg.q1_iterations.iter().map(|&n| iteration_label(n)));
    let mut jobs = Vec::new();
    for &family in &cfg.families {
        for &seed in &cfg.seeds {
            let mut settings = vec![
                ("Uniform".to_string(), cfg.routing_for(Algorithm::Uniform, family, 1, seed)),
                ("Random".to_string(), cfg.routing_for(Algorithm::Random, family, 1, seed)),
            ];
            for &n in &cfg.q1_iterations {
                settings.push((iteration_label(n), cfg.routing_for(family.into(), family, n, seed)));
            }
            for (col, rc) in settings {
                jobs.push(Job {
                    family,
                    train: rc.clone(),
                    seed,
                    evals: vec![(col, rc)],
                });
            }
        }
    }
    let results = run_jobs(cfg, &data, &jobs)?;
    Ok(assemble("Accuracy by routing setting", cfg, columns, &jobs, results))
}

/// Models trained with routing and evaluated both with it and with a
/// baseline in its place.
pub fn run_q4(cfg: &ExperimentConfig) -> Result<ComparisonTable, ExperimentError> {
    cfg.validate()?;
    let data = generate_constellation(&cfg.dataset)?;
    let [short, long] = cfg.q4_iterations;
    let columns = vec![
        "Uniform".to_string(),
        "Random".to_string(),
        iteration_label(short),
        format!("{short} iters + Uniform"),
        iteration_label(long),
        format!("{long} iters + Random"),
    ];
    let mut jobs = Vec::new();
    for &family in &cfg.families {
        for &seed in &cfg.seeds {
            let uni = cfg.routing_for(Algorithm::Uniform, family, 1, seed);
            let rnd = cfg.routing_for(Algorithm::Random, family, 1, seed);
            let r_short = cfg.routing_for(family.into(), family, short, seed);
            let r_long = cfg.routing_for(family.into(), family, long, seed);
            jobs.push(Job {
                family,
                train: uni.clone(),
                seed,
                evals: vec![(columns[0].clone(), uni.clone())],
            });
            jobs.push(Job {
                family,
                train: rnd.clone(),
                seed,
                evals: vec![(columns[1].clone(), rnd.clone())],
            });
            jobs.push(Job {
                family,
                train: r_short.clone(),
                seed,
                evals: vec![(columns[2].clone(), r_short), (columns[3].clone(), uni)],
            });
            jobs.push(Job {
                family,
                train: r_long.clone(),
                seed,
                evals: vec![(columns[4].clone(), r_long), (columns[5].clone(), rnd)],
            });
        }
    }
    let results = run_jobs(cfg, &data, &jobs)?;
    Ok(assemble("Accuracy with swapped evaluation routing", cfg, columns, &jobs, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub epoch: usize,
    pub breakdown: AgreementBreakdown,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Report {
    pub seed: u64,
    pub restarted: bool,
    pub rows: Vec<Fig1Row>,
}

impl Fig1Report {
    /// `epoch,both_correct,only_a,only_b,both_wrong,eval_accuracy`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,both_correct,only_a,only_b,both_wrong,eval_accuracy\n");
        for r in &self.rows {
            let b = &r.breakdown;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, b.both_correct, b.only_a, b.only_b, b.both_wrong, r.eval_accuracy
            )
            .unwrap();
        }
        out
    }

    pub fn last(&self) -> Option<&AgreementBreakdown> {
        self.rows.last().map(|r| &r.breakdown)
    }
}

/// Trains a dynamic-routing model with the first configured seed, recording
/// the classifier-agreement breakdown on the evaluation split every epoch.
pub fn run_fig1(cfg: &ExperimentConfig) -> Result<Fig1Report, ExperimentError> {
    cfg.validate()?;
    let data = generate_constellation(&cfg.dataset)?;
    let seed = cfg.seeds[0];
    let routing = cfg.routing_for(Algorithm::Dynamic, Family::Dynamic, cfg.fig1_iterations, seed);
    let (report, restarted) = train_with_restart(cfg, &data, &routing, seed, true)?;
    Ok(Fig1Report {
        seed,
        restarted,
        rows: report
            .epochs
            .iter()
            .zip(&report.agreement)
            .map(|(e, b)| Fig1Row {
                epoch: e.epoch,
                breakdown: *b,
                eval_accuracy: e.eval_accuracy,
            })
            .collect(),
    })
}

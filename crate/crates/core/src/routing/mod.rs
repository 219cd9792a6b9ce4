//! Routing-by-agreement algorithms and the uniform/random baselines.
//!
//! Every run records a trace with `iterations + 1` entries. Entry 0 is the
//! state before the first pass (the family's uniform-link output, or the side
//! input for attention); entry `t` holds the links used in pass `t`, the
//! poses computed from them, and the logits after that pass's update.

mod baseline;
mod engine;
mod prediction;

pub use baseline::RandomLinks;
pub use prediction::{gaussian_prediction, PredictionTensor};

pub(crate) use engine::{Entry, Inputs};

use crate::autodiff::{Graph, MASS_FLOOR};
use crate::numerics::{self, Mat};
use engine::Link;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("algorithm needs input activations a_in")]
    MissingActivations,
    #[error("attention routing needs the side input h")]
    MissingSideInput,
    #[error("inconsistent routing config: {0}")]
    ConfigMismatch(String),
    #[error("invalid prediction tensor: {0}")]
    InvalidPrediction(String),
}

/// The five published routing procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dynamic,
    Em,
    Optim,
    Group,
    Attention,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Dynamic,
        Family::Em,
        Family::Optim,
        Family::Group,
        Family::Attention,
    ];

    pub fn needs_activations(self) -> bool {
        matches!(self, Family::Em | Family::Group)
    }

    /// Families whose links are a softmax over outputs.
    pub fn is_softmax(self) -> bool {
        matches!(self, Family::Dynamic | Family::Optim | Family::Attention)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Dynamic => "dynamic",
            Family::Em => "em",
            Family::Optim => "optim",
            Family::Group => "group",
            Family::Attention => "attention",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dynamic,
    Em,
    Optim,
    Group,
    Attention,
    Uniform,
    Random,
}

impl Algorithm {
    pub fn family(self) -> Option<Family> {
        match self {
            Algorithm::Dynamic => Some(Family::Dynamic),
            Algorithm::Em => Some(Family::Em),
            Algorithm::Optim => Some(Family::Optim),
            Algorithm::Group => Some(Family::Group),
            Algorithm::Attention => Some(Family::Attention),
            Algorithm::Uniform | Algorithm::Random => None,
        }
    }

    pub fn is_baseline(self) -> bool {
        self.family().is_none()
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Uniform => "uniform",
            Algorithm::Random => "random",
            other => other.family().map(Family::name).unwrap_or_default(),
        }
    }
}

impl From<Family> for Algorithm {
    fn from(f: Family) -> Self {
        match f {
            Family::Dynamic => Algorithm::Dynamic,
            Family::Em => Algorithm::Em,
            Family::Optim => Algorithm::Optim,
            Family::Group => Algorithm::Group,
            Family::Attention => Algorithm::Attention,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = RoutingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "dynamic" => Algorithm::Dynamic,
            "em" => Algorithm::Em,
            "optim" => Algorithm::Optim,
            "group" => Algorithm::Group,
            "attention" => Algorithm::Attention,
            "uniform" => Algorithm::Uniform,
            "random" => Algorithm::Random,
            other => return Err(RoutingError::ConfigMismatch(format!("unknown algorithm '{other}'"))),
        })
    }
}

impl std::str::FromStr for Family {
    type Err = RoutingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<Algorithm>()?
            .family()
            .ok_or_else(|| RoutingError::ConfigMismatch(format!("'{s}' is not a routing family")))
    }
}

fn default_epsilon() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    1.0
}
fn default_low() -> f64 {
    0.8
}
fn default_high() -> f64 {
    1.2
}
fn default_tol() -> f64 {
    1e-8
}
fn default_cap() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub algorithm: Algorithm,
    /// Which family's output rule the baselines use. Must agree with
    /// `algorithm` when both name a family; baselines default to dynamic.
    #[serde(default)]
    pub family: Option<Family>,
    #[serde(default)]
    pub iterations: usize,
    /// Agreement scale. Defaults to 1 for optim and 0.01 for EM.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
    #[serde(default = "default_alpha")]
    pub alpha_g: f64,
    #[serde(default)]
    pub beta_g: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_low")]
    pub random_low: f64,
    #[serde(default = "default_high")]
    pub random_high: f64,
    #[serde(default)]
    pub run_to_convergence: bool,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default = "default_cap")]
    pub max_iterations_cap: usize,
}

impl RoutingConfig {
    pub fn new(algorithm: Algorithm, iterations: usize) -> Self {
        Self {
            algorithm,
            family: None,
            iterations,
            lambda: None,
            epsilon: default_epsilon(),
            beta1: 0.0,
            beta2: 0.0,
            alpha_g: default_alpha(),
            beta_g: 0.0,
            rng_seed: 0,
            random_low: default_low(),
            random_high: default_high(),
            run_to_convergence: false,
            convergence_tol: default_tol(),
            max_iterations_cap: default_cap(),
        }
    }

    /// A baseline that borrows `family`'s output rule.
    pub fn baseline(algorithm: Algorithm, family: Family, iterations: usize) -> Self {
        Self {
            family: Some(family),
            ..Self::new(algorithm, iterations)
        }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = Some(family);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn converging(mut self, tol: f64, cap: usize) -> Self {
        self.run_to_convergence = true;
        self.convergence_tol = tol;
        self.max_iterations_cap = cap;
        self
    }

    pub fn effective_family(&self) -> Family {
        self.algorithm
            .family()
            .or(self.family)
            .unwrap_or(Family::Dynamic)
    }

    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.effective_family() {
            Family::Em => 0.01,
            _ => 1.0,
        })
    }

    pub fn validate(&self) -> Result<Family, RoutingError> {
        let mismatch = |m: String| Err(RoutingError::ConfigMismatch(m));
        if let (Some(own), Some(declared)) = (self.algorithm.family(), self.family) {
            if own != declared {
                return mismatch(format!("algorithm {own} declared with family {declared}"));
            }
        }
        let family = self.effective_family();
        if family == Family::Em && !(self.epsilon > 0.0) {
            return mismatch(format!("EM needs epsilon > 0, got {}", self.epsilon));
        }
        let finite = [
            self.epsilon,
            self.beta1,
            self.beta2,
            self.alpha_g,
            self.beta_g,
            self.effective_lambda(),
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return mismatch("non-finite routing constant".into());
        }
        if self.algorithm == Algorithm::Random
            && !(self.random_low.is_finite()
                && self.random_high.is_finite()
                && self.random_low <= self.random_high)
        {
            return mismatch(format!(
                "random range [{}, {}] is empty",
                self.random_low, self.random_high
            ));
        }
        if self.run_to_convergence && !(self.convergence_tol > 0.0) {
            return mismatch("convergence_tol must be positive".into());
        }
        Ok(family)
    }
}

/// One trace entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub b: Mat,
    pub c: Mat,
    pub y: Mat,
    pub a_out: Vec<f64>,
    /// `u_ij · y_j`.
    pub agreement: Mat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingResult {
    pub algorithm: Algorithm,
    pub family: Family,
    pub config: RoutingConfig,
    pub y: Mat,
    pub a_out: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<Mat>,
    pub trace: Vec<Snapshot>,
    /// Whether the last two passes moved no link by more than the tolerance.
    pub converged: bool,
    pub iterations_used: usize,
    /// Output capsules that received (numerically) no link weight in some
    /// pass; their EM mean was held at the previous value.
    pub degenerate: Vec<usize>,
}

impl RoutingResult {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.trace.last().expect("trace is never empty")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("routing results serialize")
    }
}

/// Runs the configured algorithm and records the full trace.
pub fn route(pred: &PredictionTensor, cfg: &RoutingConfig) -> Result<RoutingResult, RoutingError> {
    let family = check(pred, cfg)?;
    let dims = pred.dims();
    let mut driver = Driver::new(pred, cfg, family);
    let cap = if cfg.run_to_convergence {
        cfg.max_iterations_cap
    } else {
        cfg.iterations
    };

    match cfg.algorithm {
        Algorithm::Uniform => {
            let snap = driver.compose(&engine::uniform_links(dims), 0);
            let count = if cfg.run_to_convergence { 1 } else { cfg.iterations + 1 };
            for t in 0..count {
                driver.trace.push(Snapshot {
                    iteration: t,
                    ..snap.clone()
                });
            }
            driver.converged = true;
        }
        Algorithm::Random => {
            let mut links = RandomLinks::new(cfg);
            for t in 0..=cap {
                let draw = links.draw(dims.links());
                let snap = driver.compose(&draw, t);
                driver.trace.push(snap);
                driver.note_convergence(t);
            }
        }
        _ => {
            let first = driver.init();
            driver.trace.push(first);
            for t in 1..=cap {
                driver.pass(t);
                if driver.note_convergence(t) && cfg.run_to_convergence {
                    break;
                }
            }
        }
    }
    Ok(driver.finish())
}

macro_rules! family_entry {
    ($(#[$m:meta])* $name:ident, $alg:expr) => {
        $(#[$m])*
        pub fn $name(pred: &PredictionTensor, cfg: &RoutingConfig) -> Result<RoutingResult, RoutingError> {
            let cfg = RoutingConfig { algorithm: $alg, ..cfg.clone() };
            route(pred, &cfg)
        }
    };
}

family_entry!(
    /// Softmax links, squashed weighted vote sum, additive agreement logits.
    route_dynamic,
    Algorithm::Dynamic
);
family_entry!(
    /// Gaussian-mixture style E/M alternation over output capsules.
    route_em,
    Algorithm::Em
);
family_entry!(
    /// Softmax links with logits reassigned to `λ u·v` every pass.
    route_optim,
    Algorithm::Optim
);
family_entry!(
    /// Sigmoid-of-distance links and activation-weighted means.
    route_group,
    Algorithm::Group
);
family_entry!(
    /// Softmax links and additive pose accumulation from a side input.
    route_attention,
    Algorithm::Attention
);
family_entry!(route_uniform, Algorithm::Uniform);
family_entry!(route_random, Algorithm::Random);

fn check(pred: &PredictionTensor, cfg: &RoutingConfig) -> Result<Family, RoutingError> {
    let family = cfg.validate()?;
    pred.validate()?;
    if family.needs_activations() && pred.a_in().is_none() {
        return Err(RoutingError::MissingActivations);
    }
    if family == Family::Attention && pred.h().is_none() {
        return Err(RoutingError::MissingSideInput);
    }
    Ok(family)
}

/// Builds the graph inputs for a family as constants.
pub(crate) fn constant_inputs(g: &mut Graph, pred: &PredictionTensor, cfg: &RoutingConfig) -> Inputs {
    let u = g.constant(pred.votes().to_vec());
    let a = pred.a_in().map(|a| g.constant(a.to_vec()));
    let y0 = pred.h().map(|h| g.constant(h.to_vec()));
    Inputs {
        u,
        a,
        y0,
        beta1: g.scalar_constant(cfg.beta1),
        beta2: g.scalar_constant(cfg.beta2),
        alpha: g.scalar_constant(cfg.alpha_g),
        beta: g.scalar_constant(cfg.beta_g),
        dims: pred.dims(),
    }
}

/// Value-only routing: one small graph per pass, state carried as plain
/// vectors between them.
struct Driver<'a> {
    pred: &'a PredictionTensor,
    cfg: &'a RoutingConfig,
    family: Family,
    trace: Vec<Snapshot>,
    converged: bool,
    degenerate: Vec<bool>,
}

impl<'a> Driver<'a> {
    fn new(pred: &'a PredictionTensor, cfg: &'a RoutingConfig, family: Family) -> Self {
        Self {
            pred,
            cfg,
            family,
            trace: Vec::new(),
            converged: false,
            degenerate: vec![false; pred.outputs()],
        }
    }

    fn init(&mut self) -> Snapshot {
        let mut g = Graph::detached();
        let inp = constant_inputs(&mut g, self.pred, self.cfg);
        let e = engine::init(&mut g, &inp, self.family, self.cfg, Link::Live);
        self.snapshot(&g, &e, 0)
    }

    fn compose(&mut self, assign: &[f64], t: usize) -> Snapshot {
        let mut g = Graph::detached();
        let inp = constant_inputs(&mut g, self.pred, self.cfg);
        let a = g.constant(assign.to_vec());
        let e = engine::compose(&mut g, &inp, self.family, self.cfg, a, Link::Live);
        self.snapshot(&g, &e, t)
    }

    fn pass(&mut self, t: usize) {
        let prev = self.trace.last().expect("initial entry recorded");
        let mut g = Graph::detached();
        let inp = constant_inputs(&mut g, self.pred, self.cfg);
        let prev_entry = Entry {
            b: g.constant(prev.b.as_slice().to_vec()),
            c: g.constant(prev.c.as_slice().to_vec()),
            y: g.constant(prev.y.as_slice().to_vec()),
            a_out: g.constant(prev.a_out.clone()),
            sigma2: None,
            mass: None,
        };
        let e = engine::step(&mut g, &inp, self.family, self.cfg, &prev_entry, Link::Live);
        let snap = self.snapshot(&g, &e, t);
        self.trace.push(snap);
    }

    /// Records whether pass `t` left the links (nearly) unchanged.
    fn note_convergence(&mut self, t: usize) -> bool {
        // entries 0 and 1 share their links by construction
        if t < 2 {
            return false;
        }
        let n = self.trace.len();
        let delta = self.trace[n - 1].c.max_abs_diff(&self.trace[n - 2].c);
        self.converged = delta < self.cfg.convergence_tol;
        self.converged
    }

    fn snapshot(&mut self, g: &Graph, e: &Entry, t: usize) -> Snapshot {
        let dims = self.pred.dims();
        if let Some(mass) = e.mass {
            for (flag, &m) in self.degenerate.iter_mut().zip(g.value(mass)) {
                *flag |= m < MASS_FLOOR;
            }
        }
        let y = g.value(e.y);
        Snapshot {
            iteration: t,
            b: Mat::from_vec(dims.inputs, dims.outputs, g.value(e.b).to_vec()),
            c: Mat::from_vec(dims.inputs, dims.outputs, g.value(e.c).to_vec()),
            y: Mat::from_vec(dims.outputs, dims.dim, y.to_vec()),
            a_out: g.value(e.a_out).to_vec(),
            agreement: agreement(self.pred, y),
            sigma2: e
                .sigma2
                .map(|s| Mat::from_vec(dims.outputs, dims.dim, g.value(s).to_vec())),
        }
    }

    fn finish(self) -> RoutingResult {
        let last = self.trace.last().expect("trace is never empty").clone();
        RoutingResult {
            algorithm: self.cfg.algorithm,
            family: self.family,
            config: self.cfg.clone(),
            y: last.y,
            a_out: last.a_out,
            sigma2: last.sigma2,
            iterations_used: self.trace.len() - 1,
            trace: self.trace,
            converged: self.converged,
            degenerate: self
                .degenerate
                .iter()
                .enumerate()
                .filter_map(|(j, &d)| d.then_some(j))
                .collect(),
        }
    }
}

fn agreement(pred: &PredictionTensor, y: &[f64]) -> Mat {
    let (i_n, j_n, d) = (pred.inputs(), pred.outputs(), pred.dim());
    let mut out = Mat::zeros(i_n, j_n);
    for i in 0..i_n {
        for j in 0..j_n {
            out.set(i, j, numerics::dot(pred.vote(i, j), &y[j * d..(j + 1) * d]));
        }
    }
    out
}

/// How links enter an unrolled, differentiable routing run.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LinkPlan<'a> {
    Live,
    Detached,
    /// Per-entry link values to hold fixed (indexed by trace entry).
    Replay(&'a [Vec<f64>]),
}

/// Unrolls routing on `g` and returns the final entry. Random baselines
/// consume their draws for every entry but only build the last one, since
/// entries do not feed each other.
pub(crate) fn unroll(
    g: &mut Graph,
    inp: &Inputs,
    cfg: &RoutingConfig,
    plan: LinkPlan,
) -> Entry {
    let family = cfg.effective_family();
    let dims = inp.dims;
    let link = |t: usize| match plan {
        LinkPlan::Live => Link::Live,
        LinkPlan::Detached => Link::Detached,
        LinkPlan::Replay(cs) => Link::Fixed(&cs[t]),
    };
    match cfg.algorithm {
        Algorithm::Uniform => {
            let a = g.constant(engine::uniform_links(dims));
            engine::compose(g, inp, family, cfg, a, link(0))
        }
        Algorithm::Random => {
            let mut links = RandomLinks::new(cfg);
            let mut draw = links.draw(dims.links());
            for _ in 0..cfg.iterations {
                draw = links.draw(dims.links());
            }
            let a = g.constant(draw);
            engine::compose(g, inp, family, cfg, a, link(cfg.iterations))
        }
        _ => {
            let mut e = engine::init(g, inp, family, cfg, link(0));
            for t in 1..=cfg.iterations {
                e = engine::step(g, inp, family, cfg, &e, link(t));
            }
            e
        }
    }
}

/// Link values an unrolled run used at each trace entry, as needed to replay
/// it with the links held fixed.
pub(crate) fn trace_links(result: &RoutingResult) -> Vec<Vec<f64>> {
    result
        .trace
        .iter()
        .map(|s| s.c.as_slice().to_vec())
        .collect()
}

use super::agreement::{classifier_agreement, AgreementBreakdown};
use super::model::{scores_on_graph, ToyModel};
use super::{NetworkError, Sample};
use crate::autodiff::{self, Graph};
use crate::numerics::{self, argmax};
use crate::routing::{Algorithm, LinkPlan, RoutingConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const FIT_REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Margin,
    CrossEntropy,
}

impl LossKind {
    pub fn value(self, scores: &[f64], label: usize) -> f64 {
        match self {
            LossKind::Margin => autodiff::margin_loss_value(scores, label),
            LossKind::CrossEntropy => numerics::logsumexp(scores) - scores[label],
        }
    }
}

/// Margin loss on class scores (`m⁺ = 0.9`, `m⁻ = 0.1`, down-weight 0.5).
pub fn loss(scores: &[f64], label: usize) -> Result<f64, NetworkError> {
    loss_with(LossKind::Margin, scores, label)
}

pub fn loss_with(kind: LossKind, scores: &[f64], label: usize) -> Result<f64, NetworkError> {
    if label >= scores.len() {
        return Err(NetworkError::LabelOutOfRange {
            label,
            classes: scores.len(),
        });
    }
    Ok(kind.value(scores, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Multiply by `gamma` every `every` epochs.
    Step { lr: f64, every: usize, gamma: f64 },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Step { lr, every, gamma } => lr * gamma.powi((epoch / every.max(1)) as i32),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::Step { lr, .. } => lr,
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_loss() -> LossKind {
    LossKind::Margin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub routing: RoutingConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Treat link strengths as constants in the backward pass.
    #[serde(default)]
    pub block_c_gradient: bool,
    #[serde(default)]
    pub seed: u64,
    /// Rescale the batch gradient to at most this Euclidean norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Record the classifier-agreement breakdown on the eval split after
    /// every epoch.
    #[serde(default)]
    pub record_agreement: bool,
    /// Spread per-sample gradients over the rayon pool. Results are summed
    /// in sample order either way, so this never changes the numbers.
    #[serde(default)]
    pub parallel: bool,
}

impl TrainConfig {
    pub fn new(routing: RoutingConfig, epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            routing,
            epochs,
            batch_size,
            schedule: LrSchedule::Constant { lr },
            momentum: default_momentum(),
            loss: default_loss(),
            block_c_gradient: false,
            seed: 0,
            clip_norm: None,
            record_agreement: false,
            parallel: false,
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.schedule.base() >= 0.0) || !self.schedule.base().is_finite() {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.routing.run_to_convergence {
            return bad("training unrolls a fixed number of routing iterations");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Running means over the epoch's mini-batches.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agreement: Vec<AgreementBreakdown>,
    /// Epoch in which the loss stopped being finite, if it did.
    #[serde(default)]
    pub diverged_at: Option<usize>,
    pub model: ToyModel,
}

impl FitReport {
    pub fn final_eval_accuracy(&self) -> f64 {
        self.epochs.last().map(|e| e.eval_accuracy).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit reports serialize")
    }

    /// `epoch,lr,train_loss,train_accuracy,eval_loss,eval_accuracy`
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_accuracy,eval_loss,eval_accuracy\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.lr, e.train_loss, e.train_accuracy, e.eval_loss, e.eval_accuracy
            )
            .unwrap();
        }
        out
    }
}

/// Stateless 64-bit mix used to derive per-sample random-routing seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Routing config for one sample: only random routing reads the seed.
pub(crate) fn sample_routing(cfg: &RoutingConfig, parts: &[u64]) -> RoutingConfig {
    let mut out = cfg.clone();
    if cfg.algorithm == Algorithm::Random {
        let mut all = vec![cfg.rng_seed];
        all.extend_from_slice(parts);
        out.rng_seed = mix_seed(&all);
    }
    out
}

/// Output of one sample's backward pass.
struct SampleGrad {
    grads: Vec<Vec<f64>>,
    loss: f64,
    correct: bool,
}

fn sample_gradient(
    model: &ToyModel,
    sample: &Sample,
    routing_cfg: &RoutingConfig,
    loss: LossKind,
    block: bool,
) -> SampleGrad {
    let mut g = Graph::new(model.params());
    let plan = if block { LinkPlan::Detached } else { LinkPlan::Live };
    let scores = scores_on_graph(&mut g, model, &sample.x, routing_cfg, plan);
    let out = match loss {
        LossKind::Margin => g.margin_loss(scores, sample.label),
        LossKind::CrossEntropy => g.cross_entropy(scores, sample.label),
    };
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    g.backward(out, 1.0, &mut grads);
    SampleGrad {
        correct: argmax(g.value(scores)) == sample.label,
        loss: g.scalar(out),
        grads,
    }
}

/// Batch gradient, loss sum and number of correct predictions. Per-sample
/// routing seeds are derived from `seed_parts` and the position in `batch`.
fn batch_gradient(
    model: &ToyModel,
    batch: &[&Sample],
    cfg: &TrainConfig,
    seed_parts: &[u64],
) -> (Vec<Vec<f64>>, f64, usize) {
    let work = |(k, s): (usize, &&Sample)| {
        let mut parts = seed_parts.to_vec();
        parts.push(k as u64);
        let rc = sample_routing(&cfg.routing, &parts);
        sample_gradient(model, s, &rc, cfg.loss, cfg.block_c_gradient)
    };
    let per_sample: Vec<SampleGrad> = if cfg.parallel {
        batch.par_iter().enumerate().map(work).collect()
    } else {
        batch.iter().enumerate().map(work).collect()
    };
    let mut total: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for sg in &per_sample {
        for (t, g) in total.iter_mut().zip(&sg.grads) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        loss += sg.loss;
        correct += sg.correct as usize;
    }
    (total, loss, correct)
}

fn check_labels(model: &ToyModel, data: &[Sample]) -> Result<(), NetworkError> {
    let classes = model.shape().classes;
    for s in data {
        model.check_input(&s.x)?;
        if s.label >= classes {
            return Err(NetworkError::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
    }
    Ok(())
}

/// Mean loss gradient over `batch`, back-propagated through every unrolled
/// routing pass (or with links held constant when `block_c_gradient`).
pub fn gradient(model: &ToyModel, batch: &[Sample], cfg: &TrainConfig) -> Result<Vec<Vec<f64>>, NetworkError> {
    model.check_compatible(&cfg.routing)?;
    if batch.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    check_labels(model, batch)?;
    let refs: Vec<&Sample> = batch.iter().collect();
    let (mut grads, _, _) = batch_gradient(model, &refs, cfg, &[]);
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok(grads)
}

/// Accuracy and mean loss under an arbitrary routing config.
pub fn evaluate_detailed(
    model: &ToyModel,
    data: &[Sample],
    cfg: &RoutingConfig,
    loss: LossKind,
) -> Result<(f64, f64), NetworkError> {
    model.check_compatible(cfg)?;
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    check_labels(model, data)?;
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for (k, s) in data.iter().enumerate() {
        let rc = sample_routing(cfg, &[k as u64]);
        let mut g = Graph::new(model.params());
        let scores = scores_on_graph(&mut g, model, &s.x, &rc, LinkPlan::Live);
        let sc = g.value(scores);
        correct += (argmax(sc) == s.label) as usize;
        total_loss += loss.value(sc, s.label);
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, total_loss / n))
}

/// Accuracy under an arbitrary routing config (e.g. train with routing,
/// evaluate with a baseline).
pub fn evaluate(model: &ToyModel, data: &[Sample], cfg: &RoutingConfig) -> Result<f64, NetworkError> {
    Ok(evaluate_detailed(model, data, cfg, LossKind::Margin)?.0)
}

/// Mini-batch SGD with momentum. Fully deterministic given the model, the
/// data and `cfg.seed`.
pub fn train(
    mut model: ToyModel,
    train_data: &[Sample],
    eval_data: &[Sample],
    cfg: &TrainConfig,
) -> Result<FitReport, NetworkError> {
    cfg.validate()?;
    model.check_compatible(&cfg.routing)?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    check_labels(&model, train_data)?;
    check_labels(&model, eval_data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5348_5546]));
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut report = FitReport {
        schema_version: FIT_REPORT_SCHEMA,
        train: cfg.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        agreement: Vec::new(),
        diverged_at: None,
        model: model.clone(),
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &train_data[k]).collect();
            let (mut grads, loss, ok) =
                batch_gradient(&model, &batch, cfg, &[cfg.seed, epoch as u64, b as u64]);
            loss_sum += loss;
            correct += ok;
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                report.diverged_at = Some(epoch);
                report.model = model;
                return Err(NetworkError::DivergedTraining(Box::new(report)));
            }
            if let Some(limit) = cfg.clip_norm {
                if norm > limit {
                    grads.iter_mut().flatten().for_each(|v| *v *= limit / norm);
                }
            }
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for k in 0..p.len() {
                    v[k] = cfg.momentum * v[k] + g[k];
                    p[k] -= lr * v[k];
                }
            }
        }
        let (eval_accuracy, eval_loss) = evaluate_detailed(&model, eval_data, &cfg.routing, cfg.loss)?;
        let n = train_data.len() as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            eval_loss,
            eval_accuracy,
        });
        if !eval_loss.is_finite() || !model.is_finite() {
            report.diverged_at = Some(epoch);
            report.model = model;
            return Err(NetworkError::DivergedTraining(Box::new(report)));
        }
        if cfg.record_agreement {
            report
                .agreement
                .push(classifier_agreement(&model, eval_data, &cfg.routing)?);
        }
    }
    report.model = model;
    Ok(report)
}

use super::model::{forward, scores_on_graph, InitScale, ModelShape, ToyModel};
use super::train::{gradient, sample_routing, LossKind, TrainConfig};
use super::{NetworkError, Sample};
use crate::autodiff::Graph;
use crate::routing::{self, Algorithm, LinkPlan, RoutingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub block_c_gradient: bool,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst relative error.
    pub worst: Option<(String, usize)>,
}

/// Mean batch loss with the routing links either live or replayed from
/// `links` (one per sample) as constants.
fn batch_loss(model: &ToyModel, batch: &[Sample], cfg: &TrainConfig, links: Option<&[Vec<Vec<f64>>]>) -> f64 {
    let mut total = 0.0;
    for (k, s) in batch.iter().enumerate() {
        let rc = sample_routing(&cfg.routing, &[k as u64]);
        let mut g = Graph::new(model.params());
        let plan = match links {
            Some(l) => LinkPlan::Replay(&l[k]),
            None => LinkPlan::Live,
        };
        let scores = scores_on_graph(&mut g, model, &s.x, &rc, plan);
        total += cfg.loss.value(g.value(scores), s.label);
    }
    total / batch.len() as f64
}

/// Compares [`gradient`] with central differences of the mean batch loss
/// over every parameter. With `block_c_gradient` the differences are taken
/// with each sample's links frozen at their unperturbed values, which is the
/// function the blocked gradient differentiates.
pub fn grad_check(model: &ToyModel, batch: &[Sample], cfg: &TrainConfig, step: f64) -> Result<GradCheckReport, NetworkError> {
    let analytic = gradient(model, batch, cfg)?;
    let links = if cfg.block_c_gradient {
        let mut all = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            let (res, _) = forward(model, &s.x, &sample_routing(&cfg.routing, &[k as u64]))?;
            all.push(routing::trace_links(&res));
        }
        Some(all)
    } else {
        None
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        algorithm: cfg.routing.algorithm,
        iterations: cfg.routing.iterations,
        block_c_gradient: cfg.block_c_gradient,
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (p, grads) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            let orig = probe.params()[p][k];
            probe.params_mut()[p][k] = orig + step;
            let up = batch_loss(&probe, batch, cfg, links.as_deref());
            probe.params_mut()[p][k] = orig - step;
            let down = batch_loss(&probe, batch, cfg, links.as_deref());
            probe.params_mut()[p][k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (numeric - grads[k]).abs();
            let rel = abs / numeric.abs().max(grads[k].abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((model.specs()[p].name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// The fixed seeded checking setup: a two-class model with 8 primary
/// capsules of length 8, and a small labelled batch. The model is built for
/// the algorithm's family (baselines use dynamic routing's).
pub fn grad_check_fixture(
    algorithm: Algorithm,
    iterations: usize,
    block_c_gradient: bool,
    seed: u64,
) -> Result<(ToyModel, Vec<Sample>, TrainConfig), NetworkError> {
    let routing = RoutingConfig::new(algorithm, iterations).with_seed(seed);
    let family = routing.effective_family();
    let shape = ModelShape {
        input_dim: 4,
        features: 6,
        capsules: 8,
        dim: 8,
        classes: 2,
        family,
    };
    let init = InitScale {
        features: 1.0,
        capsules: 2.0,
        votes: 1.5,
    };
    let model = ToyModel::new(shape, &routing, init, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    let batch = (0..3)
        .map(|k| Sample {
            x: (0..shape.input_dim).map(|_| rng.sample(StandardNormal)).collect(),
            label: k % shape.classes,
        })
        .collect();
    let mut cfg = TrainConfig::new(routing, 1, 3, 0.0);
    cfg.block_c_gradient = block_c_gradient;
    cfg.loss = LossKind::Margin;
    Ok((model, batch, cfg))
}

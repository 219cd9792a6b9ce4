use super::NetworkError;
use crate::autodiff::{Graph, Var, VoteDims};
use crate::routing::{self, Family, Inputs, PredictionTensor, RoutingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub features: usize,
    /// Primary capsules `I`.
    pub capsules: usize,
    /// Pose length `d`.
    pub dim: usize,
    /// Output capsules, one per class.
    pub classes: usize,
    pub family: Family,
}

impl ModelShape {
    pub fn vote_dims(&self) -> VoteDims {
        VoteDims {
            inputs: self.capsules,
            outputs: self.classes,
            dim: self.dim,
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.features == 0 || self.capsules == 0 || self.classes < 2 || self.dim < 2 {
            return Err(NetworkError::InvalidConfig(format!("degenerate model shape {self:?}")));
        }
        Ok(())
    }
}

/// Initial scale of each parameter group (standard deviations are these
/// divided by the square root of the fan-in).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScale {
    pub features: f64,
    pub capsules: f64,
    pub votes: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        Self {
            features: 1.0,
            capsules: 1.0,
            votes: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Positions of each parameter group inside [`ToyModel::params`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Slots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    act: Option<(usize, usize)>,
    votes: usize,
    side: Option<(usize, usize, usize)>,
    em: Option<(usize, usize)>,
    group: Option<(usize, usize)>,
}

fn layout(shape: &ModelShape) -> (Vec<ParamSpec>, Slots) {
    let (f, i, d, j) = (shape.features, shape.capsules, shape.dim, shape.classes);
    let mut specs = Vec::new();
    let mut push = |name: &str, rows: usize, cols: usize| {
        specs.push(ParamSpec {
            name: name.to_string(),
            rows,
            cols,
        });
        specs.len() - 1
    };
    let mut s = Slots {
        w1: push("w1", f, shape.input_dim),
        b1: push("b1", 1, f),
        w2: push("w2", i * d, f),
        b2: push("b2", 1, i * d),
        ..Slots::default()
    };
    if shape.family.needs_activations() {
        s.act = Some((push("w_act", i, f), push("b_act", 1, i)));
    }
    s.votes = if shape.family == Family::Attention {
        // one transform per output capsule, shared by all inputs
        push("w_votes", j * d, d)
    } else {
        push("w_votes", i * j * d, d)
    };
    if shape.family == Family::Attention {
        s.side = Some((push("w_side", j * d, f), push("b_side", 1, j * d), push("m_side", j * d, d)));
    }
    match shape.family {
        Family::Em => s.em = Some((push("beta1", 1, 1), push("beta2", 1, 1))),
        Family::Group => s.group = Some((push("alpha", 1, 1), push("beta", 1, 1))),
        _ => {}
    }
    (specs, s)
}

/// A two-layer feature map, a primary-capsule layer and one routed class
/// capsule layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    shape: ModelShape,
    specs: Vec<ParamSpec>,
    slots: Slots,
    params: Vec<Vec<f64>>,
}

impl ToyModel {
    /// Seeded Gaussian initialisation; routing scalars start at the values
    /// in `routing` (EM `β₁, β₂`; group `α, β`).
    pub fn new(shape: ModelShape, routing: &RoutingConfig, init: InitScale, seed: u64) -> Result<Self, NetworkError> {
        shape.validate()?;
        let (specs, slots) = layout(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let fan = |x: usize| 1.0 / (x as f64).sqrt();
        let mut params: Vec<Vec<f64>> = specs.iter().map(|s| vec![0.0; s.rows * s.cols]).collect();
        params[slots.w1] = gauss(params[slots.w1].len(), init.features * fan(shape.input_dim));
        params[slots.w2] = gauss(params[slots.w2].len(), init.capsules * fan(shape.features));
        if let Some((w, _)) = slots.act {
            params[w] = gauss(params[w].len(), fan(shape.features));
        }
        params[slots.votes] = gauss(params[slots.votes].len(), init.votes * fan(shape.dim));
        if let Some((w, _, m)) = slots.side {
            params[w] = gauss(params[w].len(), fan(shape.features));
            params[m] = gauss(params[m].len(), fan(shape.dim));
        }
        if let Some((b1, b2)) = slots.em {
            params[b1] = vec![routing.beta1];
            params[b2] = vec![routing.beta2];
        }
        if let Some((a, b)) = slots.group {
            params[a] = vec![routing.alpha_g];
            params[b] = vec![routing.beta_g];
        }
        Ok(Self {
            shape,
            specs,
            slots,
            params,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }

    /// The routing config with the model's learned routing scalars.
    /// Baselines without an explicit family borrow the model's.
    pub fn effective_routing(&self, cfg: &RoutingConfig) -> RoutingConfig {
        let mut out = cfg.clone();
        if out.algorithm.is_baseline() && out.family.is_none() {
            out.family = Some(self.shape.family);
        }
        if let Some((b1, b2)) = self.slots.em {
            out.beta1 = self.params[b1][0];
            out.beta2 = self.params[b2][0];
        }
        if let Some((a, b)) = self.slots.group {
            out.alpha_g = self.params[a][0];
            out.beta_g = self.params[b][0];
        }
        out
    }

    pub(crate) fn check_compatible(&self, cfg: &RoutingConfig) -> Result<(), NetworkError> {
        let family = self.effective_routing(cfg).validate()?;
        if family != self.shape.family {
            return Err(NetworkError::InvalidConfig(format!(
                "model built for {} routing cannot run {} ({} family)",
                self.shape.family, cfg.algorithm, family
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<(), NetworkError> {
        if x.len() != self.shape.input_dim {
            return Err(NetworkError::DimensionMismatch {
                expected: self.shape.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Everything up to (not including) routing, on `g`, whose parameters
    /// must be this model's.
    pub(crate) fn build_inputs(&self, g: &mut Graph, x: &[f64]) -> Inputs {
        let s = &self.slots;
        let shape = &self.shape;
        let (d, i_n, j_n) = (shape.dim, shape.capsules, shape.classes);
        let xv = g.constant(x.to_vec());
        let (w1, b1) = (g.param(s.w1), g.param(s.b1));
        let pre = g.affine(w1, xv, b1);
        let feat = g.tanh(pre);
        let (w2, b2) = (g.param(s.w2), g.param(s.b2));
        let caps = g.affine(w2, feat, b2);
        let primary = g.squash_rows(caps, d);
        let a = s.act.map(|(w, b)| {
            let (w, b) = (g.param(w), g.param(b));
            let z = g.affine(w, feat, b);
            g.sigmoid(z)
        });
        let w_votes = g.param(s.votes);
        let u = match shape.family {
            Family::Attention => {
                let pairs = (0..i_n).flat_map(|i| (0..j_n).map(move |j| (j, i))).collect();
                g.batched_matvec(w_votes, primary, pairs, d, d)
            }
            family => {
                let w = if family == Family::Optim {
                    g.frobenius_normalize_blocks(w_votes, d * d)
                } else {
                    w_votes
                };
                let pairs = (0..i_n * j_n).map(|ij| (ij, ij / j_n)).collect();
                g.batched_matvec(w, primary, pairs, d, d)
            }
        };
        let y0 = s.side.map(|(w, b, m)| {
            let (w, b, m) = (g.param(w), g.param(b), g.param(m));
            let h = g.affine(w, feat, b);
            g.batched_matvec(m, h, (0..j_n).map(|j| (j, j)).collect(), d, d)
        });
        let scalar = |g: &mut Graph, slot: Option<usize>, fallback: f64| match slot {
            Some(k) => g.param(k),
            None => g.scalar_constant(fallback),
        };
        let beta1 = scalar(g, s.em.map(|e| e.0), 0.0);
        let beta2 = scalar(g, s.em.map(|e| e.1), 0.0);
        let alpha = scalar(g, s.group.map(|e| e.0), 1.0);
        let beta = scalar(g, s.group.map(|e| e.1), 0.0);
        Inputs {
            u,
            a,
            y0,
            beta1,
            beta2,
            alpha,
            beta,
            dims: shape.vote_dims(),
        }
    }

    /// Votes, activations and initial poses for one input.
    pub fn predict_votes(&self, x: &[f64]) -> Result<PredictionTensor, NetworkError> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.params);
        let inp = self.build_inputs(&mut g, x);
        let dims = inp.dims;
        let mut p = PredictionTensor::new(dims.inputs, dims.outputs, dims.dim, g.value(inp.u).to_vec())?;
        if let Some(a) = inp.a {
            p = p.with_activations(g.value(a).to_vec())?;
        }
        if let Some(y0) = inp.y0 {
            p = p.with_side_input(g.value(y0).to_vec())?;
        }
        Ok(p)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            shape: self.shape,
            params: self
                .specs
                .iter()
                .zip(&self.params)
                .map(|(spec, v)| NamedParam {
                    name: spec.name.clone(),
                    value: v.chunks(spec.cols).map(<[f64]>::to_vec).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetworkError> {
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(NetworkError::Checkpoint(format!(
                "unsupported schema_version {}",
                ck.schema_version
            )));
        }
        ck.shape.validate()?;
        let (specs, slots) = layout(&ck.shape);
        if specs.len() != ck.params.len() {
            return Err(NetworkError::Checkpoint(format!(
                "expected {} parameter groups, found {}",
                specs.len(),
                ck.params.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, p) in specs.iter().zip(&ck.params) {
            let ok = p.name == spec.name
                && p.value.len() == spec.rows
                && p.value.iter().all(|r| r.len() == spec.cols);
            if !ok {
                return Err(NetworkError::Checkpoint(format!(
                    "parameter '{}' does not match {}: {}×{}",
                    p.name, spec.name, spec.rows, spec.cols
                )));
            }
            params.push(p.value.concat());
        }
        let model = Self {
            shape: ck.shape,
            specs,
            slots,
            params,
        };
        if !model.is_finite() {
            return Err(NetworkError::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Vec<Vec<f64>>,
}

/// Versioned JSON form of a [`ToyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub shape: ModelShape,
    pub params: Vec<NamedParam>,
}

impl Serialize for ToyModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ToyModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ck = Checkpoint::deserialize(d)?;
        ToyModel::from_checkpoint(&ck).map_err(serde::de::Error::custom)
    }
}

/// Routes one input and returns the full result plus the class scores
/// (output activations).
pub fn forward(
    model: &ToyModel,
    x: &[f64],
    cfg: &RoutingConfig,
) -> Result<(routing::RoutingResult, Vec<f64>), NetworkError> {
    model.check_compatible(cfg)?;
    let pred = model.predict_votes(x)?;
    let res = routing::route(&pred, &model.effective_routing(cfg))?;
    let scores = res.a_out.clone();
    Ok((res, scores))
}

/// Scores through the differentiable path; used by tests to confirm the two
/// paths agree.
pub(crate) fn scores_on_graph(g: &mut Graph, model: &ToyModel, x: &[f64], cfg: &RoutingConfig, plan: routing::LinkPlan) -> Var {
    let inp = model.build_inputs(g, x);
    routing::unroll(g, &inp, &model.effective_routing(cfg), plan).a_out
}

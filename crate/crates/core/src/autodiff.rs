//! A small reverse-mode tape over flat `f64` buffers.
//!
//! Nodes are evaluated eagerly when they are pushed, so the forward values
//! are always available (routing code reads them to record traces and to
//! test for convergence). Operations are coarse: one node per capsule-level
//! step (weighted vote sum, agreement, squash of every output capsule, ...),
//! which keeps the tape a few hundred nodes long even for ten routing passes.
//!
//! Parameters live outside the tape and are borrowed; gradients for them are
//! accumulated into caller-provided buffers by [`Graph::backward`].

use crate::numerics::{self, logistic, squash_scale};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape of a vote tensor `u[i][j][h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteDims {
    pub inputs: usize,
    pub outputs: usize,
    pub dim: usize,
}

impl VoteDims {
    pub fn links(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn votes(&self) -> usize {
        self.inputs * self.outputs * self.dim
    }

    pub fn poses(&self) -> usize {
        self.outputs * self.dim
    }
}

/// Denominator below which a weighted mean is treated as empty.
pub const MASS_FLOOR: f64 = 1e-12;

/// What a weighted mean does with an output capsule that received no mass.
#[derive(Debug, Clone, Copy)]
pub enum EmptyMass {
    /// Divide by `max(mass, MASS_FLOOR)`.
    Floor,
    /// Keep the corresponding row of the given node (zeros when `None`).
    Hold(Option<Var>),
}

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Const,
    Detach,
    Add(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowBroadcast { m: Var, v: Var, cols: usize },
    ScaleRows { m: Var, v: Var, cols: usize },
    Affine { w: Var, x: Var, b: Var },
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    SquashRows { x: Var, cols: usize },
    SoftmaxRows { x: Var, cols: usize },
    BatchedMatVec {
        w: Var,
        x: Var,
        pairs: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    },
    FrobNormalizeBlocks { w: Var, block: usize },
    WeightedSum { c: Var, u: Var, dims: VoteDims },
    Agreement { u: Var, y: Var, dims: VoteDims },
    RowNorms { x: Var, cols: usize },
    NormalizeRows { x: Var, cols: usize },
    OptimOutput { s: Var, cols: usize },
    WeightedMean { c: Var, u: Var, dims: VoteDims, empty: EmptyMass },
    WeightedVar { c: Var, u: Var, mu: Var, dims: VoteDims },
    ColSums { m: Var, cols: usize },
    EmActivation {
        sigma2: Var,
        mass: Var,
        beta1: Var,
        beta2: Var,
        lambda: f64,
        dim: usize,
    },
    GaussLogPdf { u: Var, mu: Var, sigma2: Var, dims: VoteDims },
    Distances { u: Var, y: Var, dims: VoteDims },
    GroupLogits { x: Var, alpha: Var, beta: Var },
    MarginLoss { scores: Var, label: usize },
    CrossEntropy { scores: Var, label: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Margin-loss constants (CapsNet convention).
pub const MARGIN_POS: f64 = 0.9;
pub const MARGIN_NEG: f64 = 0.1;
pub const MARGIN_DOWN_WEIGHT: f64 = 0.5;

pub struct Graph<'p> {
    params: &'p [Vec<f64>],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Vec<f64>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    /// A graph with no parameters, for pure forward evaluation.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: &[],
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(k) => &self.params[k],
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "unknown parameter {index}");
        self.push(Op::Param(index), Vec::new())
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).to_vec();
        self.push(Op::Detach, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), value)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + k).collect();
        self.push(Op::AddConst(a), value)
    }

    /// `m[r][c] + v[c]`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Var {
        let vv = self.value(v);
        let cols = vv.len();
        let value = self
            .value(m)
            .iter()
            .enumerate()
            .map(|(k, x)| x + vv[k % cols])
            .collect();
        self.push(Op::AddRowBroadcast { m, v, cols }, value)
    }

    /// `m[r][c] · v[r]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Var {
        let vv = self.value(v);
        let mv = self.value(m);
        let cols = mv.len() / vv.len();
        debug_assert_eq!(cols * vv.len(), mv.len());
        let value = mv
            .iter()
            .enumerate()
            .map(|(k, x)| x * vv[k / cols])
            .collect();
        self.push(Op::ScaleRows { m, v, cols }, value)
    }

    /// `W x + b` with `W` row-major `b.len() × x.len()`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (wv, xv, bv) = (self.value(w), self.value(x), self.value(b));
        let n = xv.len();
        debug_assert_eq!(wv.len(), n * bv.len());
        let value = bv
            .iter()
            .enumerate()
            .map(|(r, bias)| bias + numerics::dot(&wv[r * n..(r + 1) * n], xv))
            .collect();
        self.push(Op::Affine { w, x, b }, value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| logistic(v)).collect();
        self.push(Op::Sigmoid(x), value)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.ln()).collect();
        self.push(Op::Log(x), value)
    }

    pub fn squash_rows(&mut self, x: Var, cols: usize) -> Var {
        let mut value = self.value(x).to_vec();
        value
            .chunks_mut(cols)
            .for_each(numerics::squash_in_place);
        self.push(Op::SquashRows { x, cols }, value)
    }

    pub fn softmax_rows(&mut self, x: Var, cols: usize) -> Var {
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for (s, d) in src.chunks(cols).zip(value.chunks_mut(cols)) {
            numerics::softmax_into(s, d);
        }
        self.push(Op::SoftmaxRows { x, cols }, value)
    }

    /// `out[p] = W[pairs[p].0] · x[pairs[p].1]`, with `W` blocks of
    /// `rows × cols` and `x` vectors of length `cols`.
    pub fn batched_matvec(
        &mut self,
        w: Var,
        x: Var,
        pairs: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    ) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        let block = rows * cols;
        let mut value = vec![0.0; pairs.len() * rows];
        for (p, &(wi, xi)) in pairs.iter().enumerate() {
            let wb = &wv[wi * block..(wi + 1) * block];
            let xb = &xv[xi * cols..(xi + 1) * cols];
            for r in 0..rows {
                value[p * rows + r] = numerics::dot(&wb[r * cols..(r + 1) * cols], xb);
            }
        }
        self.push(
            Op::BatchedMatVec {
                w,
                x,
                pairs,
                rows,
                cols,
            },
            value,
        )
    }

    /// Divides each contiguous block of `block` entries by its Euclidean
    /// (Frobenius) norm. All-zero blocks stay zero.
    pub fn frobenius_normalize_blocks(&mut self, w: Var, block: usize) -> Var {
        let mut value = self.value(w).to_vec();
        for chunk in value.chunks_mut(block) {
            let n = numerics::norm(chunk);
            if n > 0.0 {
                chunk.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(Op::FrobNormalizeBlocks { w, block }, value)
    }

    /// `s[j] = Σ_i c[i][j] u[i][j]`.
    pub fn weighted_sum(&mut self, c: Var, u: Var, dims: VoteDims) -> Var {
        let (cv, uv) = (self.value(c), self.value(u));
        let d = dims.dim;
        let mut value = vec![0.0; dims.poses()];
        for i in 0..dims.inputs {
            for j in 0..dims.outputs {
                let w = cv[i * dims.outputs + j];
                let src = &uv[(i * dims.outputs + j) * d..][..d];
                for (dst, x) in value[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *dst += w * x;
                }
            }
        }
        self.push(Op::WeightedSum { c, u, dims }, value)
    }

    /// `a[i][j] = u[i][j] · y[j]`.
    pub fn agreement(&mut self, u: Var, y: Var, dims: VoteDims) -> Var {
        let (uv, yv) = (self.value(u), self.value(y));
        let d = dims.dim;
        let value = (0..dims.links())
            .map(|ij| {
                let j = ij % dims.outputs;
                numerics::dot(&uv[ij * d..(ij + 1) * d], &yv[j * d..(j + 1) * d])
            })
            .collect();
        self.push(Op::Agreement { u, y, dims }, value)
    }

    pub fn row_norms(&mut self, x: Var, cols: usize) -> Var {
        let value = self.value(x).chunks(cols).map(numerics::norm).collect();
        self.push(Op::RowNorms { x, cols }, value)
    }

    /// Unit-normalizes each row. Zero rows map to zero.
    pub fn normalize_rows(&mut self, x: Var, cols: usize) -> Var {
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(cols) {
            let n = numerics::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(Op::NormalizeRows { x, cols }, value)
    }

    /// `y_j = w_j s_j` with `w_j = ‖s_j‖ / (1 + max_k ‖s_k‖)`.
    pub fn optim_output(&mut self, s: Var, cols: usize) -> Var {
        let sv = self.value(s);
        let norms: Vec<f64> = sv.chunks(cols).map(numerics::norm).collect();
        let max = norms.iter().copied().fold(0.0, f64::max);
        let value = sv
            .iter()
            .enumerate()
            .map(|(k, x)| x * norms[k / cols] / (1.0 + max))
            .collect();
        self.push(Op::OptimOutput { s, cols }, value)
    }

    /// Per output capsule, `Σ_i c[i][j] u[i][j] / Σ_i c[i][j]`.
    pub fn weighted_mean(&mut self, c: Var, u: Var, dims: VoteDims, empty: EmptyMass) -> Var {
        let mass = column_sums(self.value(c), dims.outputs);
        let mut value = vec![0.0; dims.poses()];
        {
            let (cv, uv) = (self.value(c), self.value(u));
            let d = dims.dim;
            for i in 0..dims.inputs {
                for j in 0..dims.outputs {
                    let w = cv[i * dims.outputs + j];
                    let src = &uv[(i * dims.outputs + j) * d..][..d];
                    for (dst, x) in value[j * d..(j + 1) * d].iter_mut().zip(src) {
                        *dst += w * x;
                    }
                }
            }
        }
        let d = dims.dim;
        for (j, &z) in mass.iter().enumerate() {
            let row = &mut value[j * d..(j + 1) * d];
            match empty {
                EmptyMass::Floor => {
                    let z = z.max(MASS_FLOOR);
                    row.iter_mut().for_each(|v| *v /= z);
                }
                EmptyMass::Hold(held) if z < MASS_FLOOR => match held {
                    Some(h) => row.copy_from_slice(&self.value(h)[j * d..(j + 1) * d]),
                    None => row.fill(0.0),
                },
                EmptyMass::Hold(_) => row.iter_mut().for_each(|v| *v /= z),
            }
        }
        self.push(Op::WeightedMean { c, u, dims, empty }, value)
    }

    /// Per output capsule and pose component, the `c`-weighted variance of
    /// the votes about `mu`. Empty capsules get zero.
    pub fn weighted_var(&mut self, c: Var, u: Var, mu: Var, dims: VoteDims) -> Var {
        let (cv, uv, mv) = (self.value(c), self.value(u), self.value(mu));
        let mass = column_sums(cv, dims.outputs);
        let d = dims.dim;
        let mut value = vec![0.0; dims.poses()];
        for i in 0..dims.inputs {
            for j in 0..dims.outputs {
                let w = cv[i * dims.outputs + j];
                let src = &uv[(i * dims.outputs + j) * d..][..d];
                for h in 0..d {
                    let diff = src[h] - mv[j * d + h];
                    value[j * d + h] += w * diff * diff;
                }
            }
        }
        for (j, &z) in mass.iter().enumerate() {
            let row = &mut value[j * d..(j + 1) * d];
            if z < MASS_FLOOR {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        self.push(Op::WeightedVar { c, u, mu, dims }, value)
    }

    pub fn col_sums(&mut self, m: Var, cols: usize) -> Var {
        let value = column_sums(self.value(m), cols);
        self.push(Op::ColSums { m, cols }, value)
    }

    /// EM output activation:
    /// `logistic(λ (β₂ − Σ_h (β₁ + ln σ_h) · mass))` per output capsule.
    pub fn em_activation(
        &mut self,
        sigma2: Var,
        mass: Var,
        beta1: Var,
        beta2: Var,
        lambda: f64,
        dim: usize,
    ) -> Var {
        let (b1, b2) = (self.scalar(beta1), self.scalar(beta2));
        let sv = self.value(sigma2);
        let value = self
            .value(mass)
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let cost: f64 = sv[j * dim..(j + 1) * dim]
                    .iter()
                    .map(|s2| (b1 + 0.5 * s2.ln()) * z)
                    .sum();
                logistic(lambda * (b2 - cost))
            })
            .collect();
        self.push(
            Op::EmActivation {
                sigma2,
                mass,
                beta1,
                beta2,
                lambda,
                dim,
            },
            value,
        )
    }

    /// Log of the axis-aligned Gaussian density of each vote under its
    /// output capsule's `(mu, sigma2)`.
    pub fn gauss_log_pdf(&mut self, u: Var, mu: Var, sigma2: Var, dims: VoteDims) -> Var {
        let (uv, mv, sv) = (self.value(u), self.value(mu), self.value(sigma2));
        let d = dims.dim;
        let log_norm: Vec<f64> = (0..dims.outputs)
            .map(|j| {
                -0.5 * sv[j * d..(j + 1) * d]
                    .iter()
                    .map(|s2| (2.0 * std::f64::consts::PI * s2).ln())
                    .sum::<f64>()
            })
            .collect();
        let value = (0..dims.links())
            .map(|ij| {
                let j = ij % dims.outputs;
                let quad: f64 = (0..d)
                    .map(|h| {
                        let diff = uv[ij * d + h] - mv[j * d + h];
                        diff * diff / (2.0 * sv[j * d + h])
                    })
                    .sum();
                log_norm[j] - quad
            })
            .collect();
        self.push(Op::GaussLogPdf { u, mu, sigma2, dims }, value)
    }

    /// `δ[i][j] = ‖y_j − u[i][j]‖`.
    pub fn distances(&mut self, u: Var, y: Var, dims: VoteDims) -> Var {
        let (uv, yv) = (self.value(u), self.value(y));
        let d = dims.dim;
        let value = (0..dims.links())
            .map(|ij| {
                let j = ij % dims.outputs;
                uv[ij * d..(ij + 1) * d]
                    .iter()
                    .zip(&yv[j * d..(j + 1) * d])
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.push(Op::Distances { u, y, dims }, value)
    }

    /// `−α x + β` with scalar `α`, `β`.
    pub fn group_logits(&mut self, x: Var, alpha: Var, beta: Var) -> Var {
        let (a, b) = (self.scalar(alpha), self.scalar(beta));
        let value = self.value(x).iter().map(|v| -a * v + b).collect();
        self.push(Op::GroupLogits { x, alpha, beta }, value)
    }

    pub fn margin_loss(&mut self, scores: Var, label: usize) -> Var {
        let value = vec![margin_loss_value(self.value(scores), label)];
        self.push(Op::MarginLoss { scores, label }, value)
    }

    pub fn cross_entropy(&mut self, scores: Var, label: usize) -> Var {
        let s = self.value(scores);
        let value = vec![numerics::logsumexp(s) - s[label]];
        self.push(Op::CrossEntropy { scores, label }, value)
    }

    /// Back-propagates `seed · ∂out/∂·` and adds the parameter gradients into
    /// `param_grads` (indexed like the borrowed parameters).
    pub fn backward(&self, out: Var, seed: f64, param_grads: &mut [Vec<f64>]) {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[out.0] = vec![seed; self.value(out).len()];
        for n in (0..=out.0).rev() {
            if grads[n].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[n]);
            self.propagate(n, &g, &mut grads, param_grads);
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Vec<f64>], v: Var) -> &'g mut [f64] {
        if grads[v.0].is_empty() {
            grads[v.0] = vec![0.0; self.value(v).len()];
        }
        &mut grads[v.0]
    }

    fn propagate(&self, n: usize, g: &[f64], grads: &mut [Vec<f64>], params: &mut [Vec<f64>]) {
        let out = &self.nodes[n].value;
        match &self.nodes[n].op {
            Op::Param(k) => {
                let dst = &mut params[*k];
                if dst.is_empty() {
                    dst.resize(g.len(), 0.0);
                }
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Const | Op::Detach => {}
            Op::Add(a, b) => {
                axpy(self.grad_slot(grads, *a), 1.0, g);
                axpy(self.grad_slot(grads, *b), 1.0, g);
            }
            Op::Scale(a, k) => axpy(self.grad_slot(grads, *a), *k, g),
            Op::AddConst(a) => axpy(self.grad_slot(grads, *a), 1.0, g),
            Op::AddRowBroadcast { m, v, cols } => {
                axpy(self.grad_slot(grads, *m), 1.0, g);
                let gv = self.grad_slot(grads, *v);
                for (k, x) in g.iter().enumerate() {
                    gv[k % cols] += x;
                }
            }
            Op::ScaleRows { m, v, cols } => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                {
                    let gm = self.grad_slot(grads, *m);
                    for (k, x) in g.iter().enumerate() {
                        gm[k] += x * vv[k / cols];
                    }
                }
                let gv = self.grad_slot(grads, *v);
                for (k, x) in g.iter().enumerate() {
                    gv[k / cols] += x * mv[k];
                }
            }
            Op::Affine { w, x, b } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let cols = xv.len();
                axpy(self.grad_slot(grads, *b), 1.0, g);
                {
                    let gw = self.grad_slot(grads, *w);
                    for (r, gr) in g.iter().enumerate() {
                        axpy(&mut gw[r * cols..(r + 1) * cols], *gr, xv);
                    }
                }
                let gx = self.grad_slot(grads, *x);
                for (r, gr) in g.iter().enumerate() {
                    axpy(gx, *gr, &wv[r * cols..(r + 1) * cols]);
                }
            }
            Op::Tanh(x) => {
                let gx = self.grad_slot(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }
            Op::Sigmoid(x) => {
                let gx = self.grad_slot(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let gx = self.grad_slot(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] / xv[k];
                }
            }
            Op::SquashRows { x, cols } => {
                let xv = self.value(*x);
                let gx = self.grad_slot(grads, *x);
                for ((s, gy), gs) in xv
                    .chunks(*cols)
                    .zip(g.chunks(*cols))
                    .zip(gx.chunks_mut(*cols))
                {
                    let n2 = numerics::dot(s, s);
                    if n2 == 0.0 {
                        // subgradient 0 at the origin
                        continue;
                    }
                    let n = n2.sqrt();
                    let phi = squash_scale(n2);
                    let dphi_over_n = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n);
                    let sg = numerics::dot(s, gy);
                    for h in 0..s.len() {
                        gs[h] += phi * gy[h] + sg * dphi_over_n * s[h];
                    }
                }
            }
            Op::SoftmaxRows { x, cols } => {
                let gx = self.grad_slot(grads, *x);
                for ((c, gy), gs) in out
                    .chunks(*cols)
                    .zip(g.chunks(*cols))
                    .zip(gx.chunks_mut(*cols))
                {
                    let inner = numerics::dot(c, gy);
                    for k in 0..c.len() {
                        gs[k] += c[k] * (gy[k] - inner);
                    }
                }
            }
            Op::BatchedMatVec {
                w,
                x,
                pairs,
                rows,
                cols,
            } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let block = rows * cols;
                {
                    let gw = self.grad_slot(grads, *w);
                    for (p, &(wi, xi)) in pairs.iter().enumerate() {
                        let xb = &xv[xi * cols..(xi + 1) * cols];
                        for r in 0..*rows {
                            let gr = g[p * rows + r];
                            axpy(&mut gw[wi * block + r * cols..][..*cols], gr, xb);
                        }
                    }
                }
                let gx = self.grad_slot(grads, *x);
                for (p, &(wi, xi)) in pairs.iter().enumerate() {
                    for r in 0..*rows {
                        let gr = g[p * rows + r];
                        axpy(
                            &mut gx[xi * cols..(xi + 1) * cols],
                            gr,
                            &wv[wi * block + r * cols..][..*cols],
                        );
                    }
                }
            }
            Op::FrobNormalizeBlocks { w, block } => {
                let wv = self.value(*w);
                let gw = self.grad_slot(grads, *w);
                for ((src, unit), (gy, gs)) in wv
                    .chunks(*block)
                    .zip(out.chunks(*block))
                    .zip(g.chunks(*block).zip(gw.chunks_mut(*block)))
                {
                    let n = numerics::norm(src);
                    if n == 0.0 {
                        continue;
                    }
                    let inner = numerics::dot(gy, unit);
                    for k in 0..src.len() {
                        gs[k] += (gy[k] - inner * unit[k]) / n;
                    }
                }
            }
            Op::WeightedSum { c, u, dims } => {
                let (cv, uv) = (self.value(*c), self.value(*u));
                let d = dims.dim;
                {
                    let gc = self.grad_slot(grads, *c);
                    for ij in 0..dims.links() {
                        let j = ij % dims.outputs;
                        gc[ij] += numerics::dot(&uv[ij * d..(ij + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                }
                let gu = self.grad_slot(grads, *u);
                for ij in 0..dims.links() {
                    let j = ij % dims.outputs;
                    axpy(&mut gu[ij * d..(ij + 1) * d], cv[ij], &g[j * d..(j + 1) * d]);
                }
            }
            Op::Agreement { u, y, dims } => {
                let (uv, yv) = (self.value(*u), self.value(*y));
                let d = dims.dim;
                {
                    let gu = self.grad_slot(grads, *u);
                    for ij in 0..dims.links() {
                        let j = ij % dims.outputs;
                        axpy(&mut gu[ij * d..(ij + 1) * d], g[ij], &yv[j * d..(j + 1) * d]);
                    }
                }
                let gy = self.grad_slot(grads, *y);
                for ij in 0..dims.links() {
                    let j = ij % dims.outputs;
                    axpy(&mut gy[j * d..(j + 1) * d], g[ij], &uv[ij * d..(ij + 1) * d]);
                }
            }
            Op::RowNorms { x, cols } => {
                let xv = self.value(*x);
                let gx = self.grad_slot(grads, *x);
                for (r, (row, gs)) in xv.chunks(*cols).zip(gx.chunks_mut(*cols)).enumerate() {
                    if out[r] > 0.0 {
                        axpy(gs, g[r] / out[r], row);
                    }
                }
            }
            Op::NormalizeRows { x, cols } => {
                let xv = self.value(*x);
                let gx = self.grad_slot(grads, *x);
                for ((row, unit), (gy, gs)) in xv
                    .chunks(*cols)
                    .zip(out.chunks(*cols))
                    .zip(g.chunks(*cols).zip(gx.chunks_mut(*cols)))
                {
                    let n = numerics::norm(row);
                    if n == 0.0 {
                        continue;
                    }
                    let inner = numerics::dot(gy, unit);
                    for k in 0..row.len() {
                        gs[k] += (gy[k] - inner * unit[k]) / n;
                    }
                }
            }
            Op::OptimOutput { s, cols } => {
                let sv = self.value(*s);
                let norms: Vec<f64> = sv.chunks(*cols).map(numerics::norm).collect();
                let top = numerics::argmax(&norms);
                let max = norms[top];
                let denom = 1.0 + max;
                let mut g_norm = vec![0.0; norms.len()];
                let mut g_max = 0.0;
                let gs = self.grad_slot(grads, *s);
                for (j, &nj) in norms.iter().enumerate() {
                    let row = &sv[j * cols..(j + 1) * cols];
                    let gy = &g[j * cols..(j + 1) * cols];
                    axpy(&mut gs[j * cols..(j + 1) * cols], nj / denom, gy);
                    let g_w = numerics::dot(gy, row);
                    g_norm[j] += g_w / denom;
                    g_max -= g_w * nj / (denom * denom);
                }
                g_norm[top] += g_max;
                for (j, &nj) in norms.iter().enumerate() {
                    if nj > 0.0 {
                        let row = &sv[j * cols..(j + 1) * cols];
                        axpy(&mut gs[j * cols..(j + 1) * cols], g_norm[j] / nj, row);
                    }
                }
            }
            Op::WeightedMean { c, u, dims, empty } => {
                let (cv, uv) = (self.value(*c), self.value(*u));
                let d = dims.dim;
                let mass = column_sums(cv, dims.outputs);
                let mut held_rows = Vec::new();
                let mut denom = vec![0.0; dims.outputs];
                for (j, &z) in mass.iter().enumerate() {
                    denom[j] = match empty {
                        EmptyMass::Floor => z.max(MASS_FLOOR),
                        EmptyMass::Hold(_) if z < MASS_FLOOR => {
                            held_rows.push(j);
                            0.0
                        }
                        EmptyMass::Hold(_) => z,
                    };
                }
                {
                    let gc = self.grad_slot(grads, *c);
                    for ij in 0..dims.links() {
                        let j = ij % dims.outputs;
                        if denom[j] == 0.0 {
                            continue;
                        }
                        // d mean / d c = (u - mean) / Z, or u / floor when clamped
                        let gy = &g[j * d..(j + 1) * d];
                        let mut acc = 0.0;
                        for h in 0..d {
                            let shift = if mass[j] >= MASS_FLOOR { out[j * d + h] } else { 0.0 };
                            acc += gy[h] * (uv[ij * d + h] - shift);
                        }
                        gc[ij] += acc / denom[j];
                    }
                }
                {
                    let gu = self.grad_slot(grads, *u);
                    for ij in 0..dims.links() {
                        let j = ij % dims.outputs;
                        if denom[j] == 0.0 {
                            continue;
                        }
                        axpy(&mut gu[ij * d..(ij + 1) * d], cv[ij] / denom[j], &g[j * d..(j + 1) * d]);
                    }
                }
                if let EmptyMass::Hold(Some(h)) = empty {
                    if !held_rows.is_empty() {
                        let gh = self.grad_slot(grads, *h);
                        for j in held_rows {
                            axpy(&mut gh[j * d..(j + 1) * d], 1.0, &g[j * d..(j + 1) * d]);
                        }
                    }
                }
            }
            Op::WeightedVar { c, u, mu, dims } => {
                let (cv, uv, mv) = (self.value(*c), self.value(*u), self.value(*mu));
                let d = dims.dim;
                let mass = column_sums(cv, dims.outputs);
                let mut g_mu = vec![0.0; dims.poses()];
                {
                    let gc = self.grad_slot(grads, *c);
                    for ij in 0..dims.links() {
                        let j = ij % dims.outputs;
                        if mass[j] < MASS_FLOOR {
                            continue;
                        }
                        let mut acc = 0.0;
                        for h in 0..d {
                            let diff = uv[ij * d + h] - mv[j * d + h];
                            acc += g[j * d + h] * (diff * diff - out[j * d + h]);
                        }
                        gc[ij] += acc / mass[j];
                    }
                }
                {
                    let gu = self.grad_slot(grads, *u);
                    for ij in 0..dims.links() {
                        let j = ij % dims.outputs;
                        if mass[j] < MASS_FLOOR {
                            continue;
                        }
                        for h in 0..d {
                            let diff = uv[ij * d + h] - mv[j * d + h];
                            let t = g[j * d + h] * 2.0 * cv[ij] * diff / mass[j];
                            gu[ij * d + h] += t;
                            g_mu[j * d + h] -= t;
                        }
                    }
                }
                axpy(self.grad_slot(grads, *mu), 1.0, &g_mu);
            }
            Op::ColSums { m, cols } => {
                let gm = self.grad_slot(grads, *m);
                for (k, x) in gm.iter_mut().enumerate() {
                    *x += g[k % cols];
                }
            }
            Op::EmActivation {
                sigma2,
                mass,
                beta1,
                beta2,
                lambda,
                dim,
            } => {
                let (sv, zv) = (self.value(*sigma2), self.value(*mass));
                let b1 = self.scalar(*beta1);
                let mut g_b1 = 0.0;
                let mut g_b2 = 0.0;
                let mut g_z = vec![0.0; zv.len()];
                let mut g_s = vec![0.0; sv.len()];
                for (j, &z) in zv.iter().enumerate() {
                    let a = out[j];
                    let g_arg = g[j] * a * (1.0 - a) * lambda;
                    g_b2 += g_arg;
                    // d/d cost = -g_arg
                    let row = &sv[j * dim..(j + 1) * dim];
                    g_z[j] -= g_arg * row.iter().map(|s2| b1 + 0.5 * s2.ln()).sum::<f64>();
                    for h in 0..*dim {
                        g_s[j * dim + h] -= g_arg * 0.5 * z / row[h];
                    }
                    g_b1 -= g_arg * (*dim as f64) * z;
                }
                axpy(self.grad_slot(grads, *sigma2), 1.0, &g_s);
                axpy(self.grad_slot(grads, *mass), 1.0, &g_z);
                self.grad_slot(grads, *beta1)[0] += g_b1;
                self.grad_slot(grads, *beta2)[0] += g_b2;
            }
            Op::GaussLogPdf {
                u,
                mu,
                sigma2,
                dims,
            } => {
                let (uv, mv, sv) = (self.value(*u), self.value(*mu), self.value(*sigma2));
                let d = dims.dim;
                let mut g_u = vec![0.0; uv.len()];
                let mut g_mu = vec![0.0; mv.len()];
                let mut g_s = vec![0.0; sv.len()];
                for ij in 0..dims.links() {
                    let j = ij % dims.outputs;
                    let gij = g[ij];
                    if gij == 0.0 {
                        continue;
                    }
                    for h in 0..d {
                        let s2 = sv[j * d + h];
                        let diff = uv[ij * d + h] - mv[j * d + h];
                        g_u[ij * d + h] -= gij * diff / s2;
                        g_mu[j * d + h] += gij * diff / s2;
                        g_s[j * d + h] += gij * (-0.5 / s2 + diff * diff / (2.0 * s2 * s2));
                    }
                }
                axpy(self.grad_slot(grads, *u), 1.0, &g_u);
                axpy(self.grad_slot(grads, *mu), 1.0, &g_mu);
                axpy(self.grad_slot(grads, *sigma2), 1.0, &g_s);
            }
            Op::Distances { u, y, dims } => {
                let (uv, yv) = (self.value(*u), self.value(*y));
                let d = dims.dim;
                let mut g_u = vec![0.0; uv.len()];
                let mut g_y = vec![0.0; yv.len()];
                for ij in 0..dims.links() {
                    let j = ij % dims.outputs;
                    let dist = out[ij];
                    if dist == 0.0 {
                        continue;
                    }
                    for h in 0..d {
                        let t = g[ij] * (yv[j * d + h] - uv[ij * d + h]) / dist;
                        g_y[j * d + h] += t;
                        g_u[ij * d + h] -= t;
                    }
                }
                axpy(self.grad_slot(grads, *u), 1.0, &g_u);
                axpy(self.grad_slot(grads, *y), 1.0, &g_y);
            }
            Op::GroupLogits { x, alpha, beta } => {
                let xv = self.value(*x);
                let a = self.scalar(*alpha);
                axpy(self.grad_slot(grads, *x), -a, g);
                let g_alpha = -numerics::dot(xv, g);
                let g_beta: f64 = g.iter().sum();
                self.grad_slot(grads, *alpha)[0] += g_alpha;
                self.grad_slot(grads, *beta)[0] += g_beta;
            }
            Op::MarginLoss { scores, label } => {
                let sv = self.value(*scores);
                let gs = self.grad_slot(grads, *scores);
                for (j, &s) in sv.iter().enumerate() {
                    let d = if j == *label {
                        -2.0 * (MARGIN_POS - s).max(0.0)
                    } else {
                        2.0 * MARGIN_DOWN_WEIGHT * (s - MARGIN_NEG).max(0.0)
                    };
                    gs[j] += g[0] * d;
                }
            }
            Op::CrossEntropy { scores, label } => {
                let sv = self.value(*scores);
                let mut p = vec![0.0; sv.len()];
                numerics::softmax_into(sv, &mut p);
                p[*label] -= 1.0;
                axpy(self.grad_slot(grads, *scores), g[0], &p);
            }
        }
    }
}

pub(crate) fn margin_loss_value(scores: &[f64], label: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            if j == label {
                (MARGIN_POS - s).max(0.0).powi(2)
            } else {
                MARGIN_DOWN_WEIGHT * (s - MARGIN_NEG).max(0.0).powi(2)
            }
        })
        .sum()
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (k, x) in m.iter().enumerate() {
        out[k % cols] += x;
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[inline]
fn axpy(dst: &mut [f64], k: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

//! Routing passes expressed on the autodiff tape.
//!
//! The same functions drive standalone routing (one short-lived graph per
//! pass, values only) and training (one graph for the whole unrolled loop),
//! so the trace a user inspects is computed by exactly the code that is
//! differentiated.

use super::{Family, RoutingConfig};
use crate::autodiff::{EmptyMass, Graph, Var, VoteDims};

/// Graph handles for everything a routing run reads.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Inputs {
    pub u: Var,
    pub a: Option<Var>,
    /// Initial output poses (attention only).
    pub y0: Option<Var>,
    pub beta1: Var,
    pub beta2: Var,
    pub alpha: Var,
    pub beta: Var,
    pub dims: VoteDims,
}

/// One trace entry on the graph.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Entry {
    pub b: Var,
    pub c: Var,
    pub y: Var,
    pub a_out: Var,
    pub sigma2: Option<Var>,
    /// Per-output total link weight, for families that can starve a capsule.
    pub mass: Option<Var>,
}

/// How the link strengths of a pass enter the graph.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Link<'a> {
    Live,
    /// Same values, no gradient through `c`.
    Detached,
    /// Replace `c` by the given values.
    Fixed(&'a [f64]),
}

fn resolve(g: &mut Graph, link: Link, computed: impl FnOnce(&mut Graph) -> Var) -> Var {
    match link {
        Link::Live => computed(g),
        Link::Detached => {
            let c = computed(g);
            g.detach(c)
        }
        Link::Fixed(values) => g.constant(values.to_vec()),
    }
}

fn activations(inp: &Inputs) -> Var {
    inp.a.expect("activations checked by the caller")
}

pub(crate) fn uniform_links(dims: VoteDims) -> Vec<f64> {
    vec![1.0 / dims.outputs as f64; dims.links()]
}

/// The family's output rule evaluated at a fixed assignment: `c` for most
/// families, the E-step weights `b` for EM (then `c = b·a`).
pub(crate) fn compose(
    g: &mut Graph,
    inp: &Inputs,
    family: Family,
    cfg: &RoutingConfig,
    assign: Var,
    link: Link,
) -> Entry {
    let dims = inp.dims;
    let (d, j) = (dims.dim, dims.outputs);
    match family {
        Family::Dynamic => {
            let c = resolve(g, link, |_| assign);
            let s = g.weighted_sum(c, inp.u, dims);
            let y = g.squash_rows(s, d);
            let a_out = g.row_norms(y, d);
            let b = g.constant(vec![0.0; dims.links()]);
            Entry { b, c, y, a_out, sigma2: None, mass: None }
        }
        Family::Optim => {
            let c = resolve(g, link, |_| assign);
            let s = g.weighted_sum(c, inp.u, dims);
            let y = g.optim_output(s, d);
            let a_out = g.row_norms(y, d);
            let b = g.constant(vec![0.0; dims.links()]);
            Entry { b, c, y, a_out, sigma2: None, mass: None }
        }
        Family::Em => {
            let a = activations(inp);
            let c = resolve(g, link, |g| g.scale_rows(assign, a));
            em_m_step(g, inp, cfg, assign, c, None)
        }
        Family::Group => {
            let a = activations(inp);
            let c = resolve(g, link, |_| assign);
            let w = g.scale_rows(c, a);
            let mass = g.col_sums(w, j);
            let y = g.weighted_mean(w, inp.u, dims, EmptyMass::Floor);
            let a_out = group_activation(g, inp, y);
            let b = g.constant(vec![0.0; dims.links()]);
            Entry { b, c, y, a_out, sigma2: None, mass: Some(mass) }
        }
        Family::Attention => {
            let y0 = inp.y0.expect("side input checked by the caller");
            let c = resolve(g, link, |_| assign);
            let s = g.weighted_sum(c, inp.u, dims);
            let y = g.add(y0, s);
            let a_out = g.row_norms(y, d);
            let b = g.constant(vec![0.0; dims.links()]);
            Entry { b, c, y, a_out, sigma2: None, mass: None }
        }
    }
}

/// Trace entry 0: the state before the first routing pass.
pub(crate) fn init(
    g: &mut Graph,
    inp: &Inputs,
    family: Family,
    cfg: &RoutingConfig,
    link: Link,
) -> Entry {
    let dims = inp.dims;
    let uniform = g.constant(uniform_links(dims));
    match family {
        Family::Attention => {
            // the initial pose comes from the side input, not from votes
            let y = inp.y0.expect("side input checked by the caller");
            let a_out = g.row_norms(y, dims.dim);
            let b = g.constant(vec![0.0; dims.links()]);
            Entry { b, c: uniform, y, a_out, sigma2: None, mass: None }
        }
        _ => compose(g, inp, family, cfg, uniform, link),
    }
}

/// One routing pass.
pub(crate) fn step(
    g: &mut Graph,
    inp: &Inputs,
    family: Family,
    cfg: &RoutingConfig,
    prev: &Entry,
    link: Link,
) -> Entry {
    let dims = inp.dims;
    let (d, j) = (dims.dim, dims.outputs);
    match family {
        Family::Dynamic => {
            let c = resolve(g, link, |g| g.softmax_rows(prev.b, j));
            let s = g.weighted_sum(c, inp.u, dims);
            let y = g.squash_rows(s, d);
            let agree = g.agreement(inp.u, y, dims);
            let b = g.add(prev.b, agree);
            let a_out = g.row_norms(y, d);
            Entry { b, c, y, a_out, sigma2: None, mass: None }
        }
        Family::Optim => {
            let c = resolve(g, link, |g| g.softmax_rows(prev.b, j));
            let s = g.weighted_sum(c, inp.u, dims);
            let v = g.normalize_rows(s, d);
            let agree = g.agreement(inp.u, v, dims);
            let b = g.scale(agree, cfg.effective_lambda());
            let y = g.optim_output(s, d);
            let a_out = g.row_norms(y, d);
            Entry { b, c, y, a_out, sigma2: None, mass: None }
        }
        Family::Em => {
            let a = activations(inp);
            let c = resolve(g, link, |g| g.scale_rows(prev.b, a));
            let m = em_m_step(g, inp, cfg, prev.b, c, Some(prev.y));
            let sigma2 = m.sigma2.expect("em entries carry variances");
            let log_p = g.gauss_log_pdf(inp.u, m.y, sigma2, dims);
            let log_a = g.log(m.a_out);
            let logits = g.add_row_broadcast(log_p, log_a);
            let b = g.softmax_rows(logits, j);
            Entry { b, ..m }
        }
        Family::Group => {
            let a = activations(inp);
            let dist = g.distances(inp.u, prev.y, dims);
            let logits = g.group_logits(dist, inp.alpha, inp.beta);
            let c = resolve(g, link, |g| g.sigmoid(logits));
            let w = g.scale_rows(c, a);
            let mass = g.col_sums(w, j);
            let y = g.weighted_mean(w, inp.u, dims, EmptyMass::Floor);
            let a_out = group_activation(g, inp, y);
            Entry { b: logits, c, y, a_out, sigma2: None, mass: Some(mass) }
        }
        Family::Attention => {
            let c = resolve(g, link, |g| g.softmax_rows(prev.b, j));
            let s = g.weighted_sum(c, inp.u, dims);
            let y = g.add(prev.y, s);
            let agree = g.agreement(inp.u, y, dims);
            let b = g.add(prev.b, agree);
            let a_out = g.row_norms(y, d);
            Entry { b, c, y, a_out, sigma2: None, mass: None }
        }
    }
}

/// M-step plus output activation. `b` is recorded as-is.
fn em_m_step(
    g: &mut Graph,
    inp: &Inputs,
    cfg: &RoutingConfig,
    b: Var,
    c: Var,
    held_mean: Option<Var>,
) -> Entry {
    let dims = inp.dims;
    let mass = g.col_sums(c, dims.outputs);
    let mu = g.weighted_mean(c, inp.u, dims, EmptyMass::Hold(held_mean));
    let var = g.weighted_var(c, inp.u, mu, dims);
    let sigma2 = g.add_const(var, cfg.epsilon);
    let a_out = g.em_activation(
        sigma2,
        mass,
        inp.beta1,
        inp.beta2,
        cfg.effective_lambda(),
        dims.dim,
    );
    Entry {
        b,
        c,
        y: mu,
        a_out,
        sigma2: Some(sigma2),
        mass: Some(mass),
    }
}

/// `sigmoid(−α · mean_k δ(y_j, u_kj) + β)`.
fn group_activation(g: &mut Graph, inp: &Inputs, y: Var) -> Var {
    let dims = inp.dims;
    let dist = g.distances(inp.u, y, dims);
    let total = g.col_sums(dist, dims.outputs);
    let mean = g.scale(total, 1.0 / dims.inputs as f64);
    let logits = g.group_logits(mean, inp.alpha, inp.beta);
    g.sigmoid(logits)
}

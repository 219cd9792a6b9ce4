//! Straight-line reference implementations of the routing procedures,
//! written directly from the pseudocode with nested vectors and no shared
//! code with the library. Each returns one `Step` per trace entry.
#![allow(dead_code, clippy::needless_range_loop)]

pub type V3 = Vec<Vec<Vec<f64>>>;
pub type M2 = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct Step {
    pub b: M2,
    pub c: M2,
    pub y: M2,
    pub a_out: Vec<f64>,
    pub sigma2: Option<M2>,
}

pub struct Votes {
    pub u: V3,
    pub a: Vec<f64>,
    pub h: M2,
}

impl Votes {
    pub fn from_flat(i_n: usize, j_n: usize, d: usize, flat: &[f64], a: &[f64], h: &[f64]) -> Self {
        let mut u = vec![vec![vec![0.0; d]; j_n]; i_n];
        for i in 0..i_n {
            for j in 0..j_n {
                for k in 0..d {
                    u[i][j][k] = flat[(i * j_n + j) * d + k];
                }
            }
        }
        let h = (0..j_n).map(|j| h[j * d..(j + 1) * d].to_vec()).collect();
        Votes { u, a: a.to_vec(), h }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.u.len(), self.u[0].len(), self.u[0][0].len())
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn length(a: &[f64]) -> f64 {
    dotp(a, a).sqrt()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        if x > m {
            m = x;
        }
    }
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn weighted_sum(u: &V3, c: &M2) -> M2 {
    let (i_n, j_n, d) = (u.len(), u[0].len(), u[0][0].len());
    let mut s = vec![vec![0.0; d]; j_n];
    for j in 0..j_n {
        for i in 0..i_n {
            for k in 0..d {
                s[j][k] += c[i][j] * u[i][j][k];
            }
        }
    }
    s
}

fn squash_v(s: &[f64]) -> Vec<f64> {
    let n = length(s);
    s.iter().map(|x| x * n / (1.0 + n * n)).collect()
}

fn norms(y: &M2) -> Vec<f64> {
    y.iter().map(|r| length(r)).collect()
}

fn uniform(i_n: usize, j_n: usize) -> M2 {
    vec![vec![1.0 / j_n as f64; j_n]; i_n]
}

fn zeros(i_n: usize, j_n: usize) -> M2 {
    vec![vec![0.0; j_n]; i_n]
}

// ---- output rules at a fixed link assignment ----

pub fn dynamic_output(v: &Votes, c: &M2) -> Step {
    let (i_n, j_n, _) = v.dims();
    let s = weighted_sum(&v.u, c);
    let y: M2 = s.iter().map(|r| squash_v(r)).collect();
    Step { b: zeros(i_n, j_n), c: c.clone(), a_out: norms(&y), y, sigma2: None }
}

fn optim_y(s: &M2) -> M2 {
    let ns: Vec<f64> = s.iter().map(|r| length(r)).collect();
    let mut mx = 0.0f64;
    for &n in &ns {
        mx = mx.max(n);
    }
    s.iter()
        .zip(&ns)
        .map(|(r, n)| r.iter().map(|x| x * n / (1.0 + mx)).collect())
        .collect()
}

pub fn optim_output(v: &Votes, c: &M2) -> Step {
    let (i_n, j_n, _) = v.dims();
    let y = optim_y(&weighted_sum(&v.u, c));
    Step { b: zeros(i_n, j_n), c: c.clone(), a_out: norms(&y), y, sigma2: None }
}

pub struct EmParams {
    pub lambda: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// M-step and activation from assignment `r` (c = r·a).
fn em_m(v: &Votes, r: &M2, p: &EmParams, prev_mu: &M2) -> (M2, M2, M2, Vec<f64>) {
    let (i_n, j_n, d) = v.dims();
    let mut c = zeros(i_n, j_n);
    for i in 0..i_n {
        for j in 0..j_n {
            c[i][j] = r[i][j] * v.a[i];
        }
    }
    let mut mu = vec![vec![0.0; d]; j_n];
    let mut var = vec![vec![0.0; d]; j_n];
    let mut act = vec![0.0; j_n];
    for j in 0..j_n {
        let mut z = 0.0;
        for i in 0..i_n {
            z += c[i][j];
        }
        if z < 1e-12 {
            mu[j] = prev_mu[j].clone();
        } else {
            for h in 0..d {
                let mut num = 0.0;
                for i in 0..i_n {
                    num += c[i][j] * v.u[i][j][h];
                }
                mu[j][h] = num / z;
            }
        }
        for h in 0..d {
            let mut num = 0.0;
            for i in 0..i_n {
                num += c[i][j] * (v.u[i][j][h] - mu[j][h]).powi(2);
            }
            var[j][h] = if z < 1e-12 { 0.0 } else { num / z } + p.eps;
        }
        let mut cost_sum = 0.0;
        for h in 0..d {
            cost_sum += (p.beta1 + var[j][h].sqrt().ln()) * z;
        }
        act[j] = sig(p.lambda * (p.beta2 - cost_sum));
    }
    (c, mu, var, act)
}

pub fn em_output(v: &Votes, r: &M2, p: &EmParams) -> Step {
    let (_, j_n, d) = v.dims();
    let (c, mu, var, act) = em_m(v, r, p, &vec![vec![0.0; d]; j_n]);
    Step { b: r.clone(), c, y: mu, a_out: act, sigma2: Some(var) }
}

pub struct GroupParams {
    pub alpha: f64,
    pub beta: f64,
}

fn group_mean(v: &Votes, w: &M2) -> M2 {
    let (i_n, j_n, d) = v.dims();
    let mut y = vec![vec![0.0; d]; j_n];
    for j in 0..j_n {
        let mut z = 0.0;
        for i in 0..i_n {
            z += w[i][j];
        }
        let z = z.max(1e-12);
        for h in 0..d {
            let mut num = 0.0;
            for i in 0..i_n {
                num += w[i][j] * v.u[i][j][h];
            }
            y[j][h] = num / z;
        }
    }
    y
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]).powi(2);
    }
    s.sqrt()
}

fn group_act(v: &Votes, y: &M2, p: &GroupParams) -> Vec<f64> {
    let (i_n, j_n, _) = v.dims();
    (0..j_n)
        .map(|j| {
            let mut m = 0.0;
            for k in 0..i_n {
                m += dist(&y[j], &v.u[k][j]);
            }
            sig(-p.alpha * m / i_n as f64 + p.beta)
        })
        .collect()
}

pub fn group_output(v: &Votes, c: &M2, p: &GroupParams) -> Step {
    let (i_n, j_n, _) = v.dims();
    let mut w = zeros(i_n, j_n);
    for i in 0..i_n {
        for j in 0..j_n {
            w[i][j] = c[i][j] * v.a[i];
        }
    }
    let y = group_mean(v, &w);
    Step { b: zeros(i_n, j_n), c: c.clone(), a_out: group_act(v, &y, p), y, sigma2: None }
}

pub fn attention_output(v: &Votes, c: &M2) -> Step {
    let (i_n, j_n, _) = v.dims();
    let s = weighted_sum(&v.u, c);
    let y: M2 = v
        .h
        .iter()
        .zip(&s)
        .map(|(h, s)| h.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect();
    Step { b: zeros(i_n, j_n), c: c.clone(), a_out: norms(&y), y, sigma2: None }
}

// ---- full routing procedures ----

pub fn dynamic(v: &Votes, iters: usize) -> Vec<Step> {
    let (i_n, j_n, _) = v.dims();
    let mut out = vec![dynamic_output(v, &uniform(i_n, j_n))];
    let mut b = zeros(i_n, j_n);
    for _ in 0..iters {
        let c: M2 = b.iter().map(|r| softmax_row(r)).collect();
        let s = weighted_sum(&v.u, &c);
        let y: M2 = s.iter().map(|r| squash_v(r)).collect();
        for i in 0..i_n {
            for j in 0..j_n {
                b[i][j] += dotp(&v.u[i][j], &y[j]);
            }
        }
        out.push(Step { b: b.clone(), c, a_out: norms(&y), y, sigma2: None });
    }
    out
}

pub fn optim(v: &Votes, iters: usize, lambda: f64) -> Vec<Step> {
    let (i_n, j_n, _) = v.dims();
    let mut out = vec![optim_output(v, &uniform(i_n, j_n))];
    let mut b = zeros(i_n, j_n);
    for _ in 0..iters {
        let c: M2 = b.iter().map(|r| softmax_row(r)).collect();
        let s = weighted_sum(&v.u, &c);
        let vj: M2 = s
            .iter()
            .map(|r| {
                let n = length(r);
                if n == 0.0 {
                    vec![0.0; r.len()]
                } else {
                    r.iter().map(|x| x / n).collect()
                }
            })
            .collect();
        for i in 0..i_n {
            for j in 0..j_n {
                b[i][j] = lambda * dotp(&v.u[i][j], &vj[j]);
            }
        }
        let y = optim_y(&s);
        out.push(Step { b: b.clone(), c, a_out: norms(&y), y, sigma2: None });
    }
    out
}

pub fn em(v: &Votes, iters: usize, p: &EmParams) -> Vec<Step> {
    let (i_n, j_n, d) = v.dims();
    let mut r = uniform(i_n, j_n);
    let mut out = vec![em_output(v, &r, p)];
    let mut mu = out[0].y.clone();
    for _ in 0..iters {
        let (c, new_mu, var, act) = em_m(v, &r, p, &mu);
        mu = new_mu;
        // E-step with the printed density: exp(-Σ (u-μ)²/2σ²) / sqrt(Π 2πσ²)
        let mut next = zeros(i_n, j_n);
        for i in 0..i_n {
            let mut dens = vec![0.0; j_n];
            for j in 0..j_n {
                let mut prod = 1.0;
                let mut quad = 0.0;
                for h in 0..d {
                    prod *= 2.0 * std::f64::consts::PI * var[j][h];
                    quad += (v.u[i][j][h] - mu[j][h]).powi(2) / (2.0 * var[j][h]);
                }
                dens[j] = act[j] * (-quad).exp() / prod.sqrt();
            }
            let z: f64 = dens.iter().sum();
            for j in 0..j_n {
                next[i][j] = dens[j] / z;
            }
        }
        r = next;
        out.push(Step { b: r.clone(), c, y: mu.clone(), a_out: act, sigma2: Some(var) });
    }
    out
}

pub fn group(v: &Votes, iters: usize, p: &GroupParams) -> Vec<Step> {
    let (i_n, j_n, _) = v.dims();
    let first = group_output(v, &uniform(i_n, j_n), p);
    let mut y = first.y.clone();
    let mut out = vec![first];
    for _ in 0..iters {
        let mut logit = zeros(i_n, j_n);
        let mut c = zeros(i_n, j_n);
        let mut w = zeros(i_n, j_n);
        for i in 0..i_n {
            for j in 0..j_n {
                logit[i][j] = -p.alpha * dist(&y[j], &v.u[i][j]) + p.beta;
                c[i][j] = sig(logit[i][j]);
                w[i][j] = c[i][j] * v.a[i];
            }
        }
        y = group_mean(v, &w);
        out.push(Step { b: logit, c, a_out: group_act(v, &y, p), y: y.clone(), sigma2: None });
    }
    out
}

pub fn attention(v: &Votes, iters: usize) -> Vec<Step> {
    let (i_n, j_n, _) = v.dims();
    let mut y = v.h.clone();
    let mut b = zeros(i_n, j_n);
    let mut out = vec![Step { b: b.clone(), c: uniform(i_n, j_n), a_out: norms(&y), y: y.clone(), sigma2: None }];
    for _ in 0..iters {
        let c: M2 = b.iter().map(|r| softmax_row(r)).collect();
        let s = weighted_sum(&v.u, &c);
        for j in 0..j_n {
            for k in 0..y[j].len() {
                y[j][k] += s[j][k];
            }
        }
        for i in 0..i_n {
            for j in 0..j_n {
                b[i][j] += dotp(&v.u[i][j], &y[j]);
            }
        }
        out.push(Step { b: b.clone(), c, a_out: norms(&y), y: y.clone(), sigma2: None });
    }
    out
}

//! Polarization and fixed-point analysis of routing traces.

use crate::numerics::{logsumexp, Mat};
use crate::routing::{route, Algorithm, Family, PredictionTensor, RoutingConfig, RoutingError, RoutingResult};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Links at or below this are treated as cut when counting routes.
pub const SUPPORT_TOL: f64 = 1e-6;
/// Tolerance on the log-space steady-state residual.
pub const STEADY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("expected a {expected} trace, got {found}")]
    WrongAlgorithm { expected: &'static str, found: String },
    #[error("iteration list must be nonempty and strictly ascending")]
    BadIterationList,
    #[error("trace needs at least 2 entries, has {0}")]
    TraceTooShort(usize),
    #[error("routing did not converge within {} iterations", .0.iterations_used)]
    NotConverged(Box<SteadyStateReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub bins: usize,
    /// A row is polarized when its largest normalized link exceeds this.
    pub threshold: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            bins: 50,
            threshold: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    /// Counts of raw `c` values over uniform bins on `[0, 1]`; values
    /// outside the range land in the end bins.
    pub histogram: Vec<usize>,
    /// Per-row entropy of the normalized links, divided by `ln J`.
    pub entropy: Vec<f64>,
    /// Per-row largest normalized link.
    pub max_link: Vec<f64>,
    pub polarized_fraction: f64,
    pub mean_entropy: f64,
    pub mean_max_link: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationReport {
    pub algorithm: Algorithm,
    pub family: Family,
    pub options: SweepOptions,
    pub snapshots: Vec<IterationStats>,
}

impl PolarizationReport {
    pub fn at(&self, iteration: usize) -> Option<&IterationStats> {
        self.snapshots.iter().find(|s| s.iteration == iteration)
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.options.bins;
        (0..=n).map(|k| k as f64 / n as f64).collect()
    }

    /// `iteration,bin_left,bin_right,count`
    pub fn histogram_csv(&self) -> String {
        let edges = self.bin_edges();
        let mut out = String::from("iteration,bin_left,bin_right,count\n");
        for s in &self.snapshots {
            for (k, count) in s.histogram.iter().enumerate() {
                writeln!(out, "{},{},{},{}", s.iteration, edges[k], edges[k + 1], count).unwrap();
            }
        }
        out
    }

    /// `iteration,polarized_fraction,mean_entropy,mean_max_link`
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("iteration,polarized_fraction,mean_entropy,mean_max_link\n");
        for s in &self.snapshots {
            writeln!(
                out,
                "{},{},{},{}",
                s.iteration, s.polarized_fraction, s.mean_entropy, s.mean_max_link
            )
            .unwrap();
        }
        out
    }
}

/// Statistics of one link matrix.
pub fn link_stats(c: &Mat, iteration: usize, opts: &SweepOptions) -> IterationStats {
    let (rows, cols) = (c.rows(), c.cols());
    let mut histogram = vec![0usize; opts.bins];
    for &v in c.as_slice() {
        let k = ((v * opts.bins as f64).floor().max(0.0) as usize).min(opts.bins - 1);
        histogram[k] += 1;
    }
    let mut entropy = Vec::with_capacity(rows);
    let mut max_link = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = c.row(i);
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            // no link mass at all: maximally undecided
            entropy.push(1.0);
            max_link.push(0.0);
            continue;
        }
        let h: f64 = row
            .iter()
            .map(|&v| {
                let p = v / total;
                if p > 0.0 {
                    -p * p.ln()
                } else {
                    0.0
                }
            })
            .sum();
        entropy.push(if cols > 1 { (h / (cols as f64).ln()).min(1.0) } else { 0.0 });
        max_link.push(row.iter().copied().fold(0.0, f64::max) / total);
    }
    let polarized = max_link.iter().filter(|&&m| m > opts.threshold).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    IterationStats {
        iteration,
        histogram,
        polarized_fraction: polarized as f64 / rows as f64,
        mean_entropy: mean(&entropy),
        mean_max_link: mean(&max_link),
        entropy,
        max_link,
    }
}

/// Routes once to the largest requested count and summarises the trace at
/// each requested count.
pub fn sweep_iterations(
    pred: &PredictionTensor,
    cfg: &RoutingConfig,
    iterations: &[usize],
) -> Result<PolarizationReport, DynamicsError> {
    sweep_with(pred, cfg, iterations, &SweepOptions::default())
}

pub fn sweep_with(
    pred: &PredictionTensor,
    cfg: &RoutingConfig,
    iterations: &[usize],
    opts: &SweepOptions,
) -> Result<PolarizationReport, DynamicsError> {
    let ascending = iterations.windows(2).all(|w| w[0] < w[1]);
    let Some(&last) = iterations.last() else {
        return Err(DynamicsError::BadIterationList);
    };
    if !ascending || opts.bins == 0 {
        return Err(DynamicsError::BadIterationList);
    }
    let run_cfg = RoutingConfig {
        iterations: last,
        run_to_convergence: false,
        ..cfg.clone()
    };
    let res = route(pred, &run_cfg)?;
    Ok(PolarizationReport {
        algorithm: res.algorithm,
        family: res.family,
        options: *opts,
        snapshots: iterations
            .iter()
            .map(|&t| link_stats(&res.trace[t].c, t, opts))
            .collect(),
    })
}

/// Largest deviation of consecutive dynamic-routing link matrices from the
/// multiplicative update `c' ∝ c · exp(u·y)`.
///
/// Entry 0 is the pre-routing state and shares its links with entry 1, so
/// the recurrence is checked from entry 1 on.
pub fn check_multiplicative_identity(result: &RoutingResult) -> Result<f64, DynamicsError> {
    if result.algorithm != Algorithm::Dynamic {
        return Err(DynamicsError::WrongAlgorithm {
            expected: "dynamic",
            found: result.algorithm.to_string(),
        });
    }
    let trace = &result.trace;
    if trace.len() < 2 {
        return Err(DynamicsError::TraceTooShort(trace.len()));
    }
    let mut worst: f64 = 0.0;
    for t in 1..trace.len() - 1 {
        let (c, a, next) = (&trace[t].c, &trace[t].agreement, &trace[t + 1].c);
        for i in 0..c.rows() {
            let shift = a.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = c
                .row(i)
                .iter()
                .zip(a.row(i))
                .map(|(c, a)| c * (a - shift).exp())
                .collect();
            let z: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                worst = worst.max((next.get(i, j) - w / z).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateReport {
    pub converged: bool,
    pub iterations_used: usize,
    /// `|a_ij − ln Σ_k c_ik exp(a_ik)|` on surviving links (`c_ij > tol`),
    /// `None` elsewhere.
    pub residuals: Vec<Vec<Option<f64>>>,
    pub max_residual: f64,
    /// Surviving links per input capsule.
    pub r: Vec<usize>,
    /// Every pair is either cut or satisfies the fixed-point condition.
    pub steady_condition_holds: bool,
    /// Every input routes to exactly one output with strength above `1 − tol`.
    pub simple_solution: bool,
    pub final_c: Mat,
}

/// Runs to convergence and evaluates the fixed-point condition on the final
/// links. A run that hits the iteration cap yields `NotConverged` carrying
/// the full report.
pub fn check_steady_state(
    pred: &PredictionTensor,
    cfg: &RoutingConfig,
) -> Result<SteadyStateReport, DynamicsError> {
    let run_cfg = RoutingConfig {
        run_to_convergence: true,
        ..cfg.clone()
    };
    let res = route(pred, &run_cfg)?;
    let report = steady_state_report(&res);
    if report.converged {
        Ok(report)
    } else {
        Err(DynamicsError::NotConverged(Box::new(report)))
    }
}

pub fn steady_state_report(res: &RoutingResult) -> SteadyStateReport {
    let last = res.final_snapshot();
    let (c, a) = (&last.c, &last.agreement);
    let mut residuals = Vec::with_capacity(c.rows());
    let mut r = Vec::with_capacity(c.rows());
    let mut max_residual: f64 = 0.0;
    let mut simple = true;
    for i in 0..c.rows() {
        let terms: Vec<f64> = c
            .row(i)
            .iter()
            .zip(a.row(i))
            .filter(|(c, _)| **c > 0.0)
            .map(|(c, a)| c.ln() + a)
            .collect();
        let lse = logsumexp(&terms);
        let row: Vec<Option<f64>> = (0..c.cols())
            .map(|j| (c.get(i, j) > SUPPORT_TOL).then(|| (a.get(i, j) - lse).abs()))
            .collect();
        for v in row.iter().flatten() {
            max_residual = max_residual.max(*v);
        }
        let survivors = row.iter().filter(|v| v.is_some()).count();
        let strongest = c.row(i).iter().copied().fold(0.0, f64::max);
        simple &= survivors == 1 && strongest > 1.0 - SUPPORT_TOL;
        r.push(survivors);
        residuals.push(row);
    }
    SteadyStateReport {
        converged: res.converged,
        iterations_used: res.iterations_used,
        residuals,
        max_residual,
        r,
        steady_condition_holds: max_residual <= STEADY_TOL,
        simple_solution: simple,
        final_c: c.clone(),
    }
}

/// Output capsules whose largest variance component sits on the ε floor,
/// i.e. `max_h σ²_jh ≤ ε (1 + ratio)`.
pub fn detect_em_singularity(result: &RoutingResult, sigma_floor_ratio: f64) -> Result<Vec<usize>, DynamicsError> {
    let sigma2 = match (&result.family, &result.sigma2) {
        (Family::Em, Some(s)) => s,
        _ => {
            return Err(DynamicsError::WrongAlgorithm {
                expected: "em",
                found: result.algorithm.to_string(),
            })
        }
    };
    let limit = result.config.epsilon * (1.0 + sigma_floor_ratio);
    Ok((0..sigma2.rows())
        .filter(|&j| sigma2.row(j).iter().copied().fold(0.0, f64::max) <= limit)
        .collect())
}

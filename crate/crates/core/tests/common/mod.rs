#![allow(dead_code)]

pub mod oracle;

use capsule_routing::routing::{
    gaussian_prediction, route, Algorithm, Family, PredictionTensor, RoutingConfig, RoutingResult,
};
use oracle::{EmParams, GroupParams, Step, Votes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn instance(i: usize, j: usize, d: usize, seed: u64) -> PredictionTensor {
    gaussian_prediction(i, j, d, 1.0, seed)
}

pub fn votes_of(p: &PredictionTensor) -> Votes {
    Votes::from_flat(
        p.inputs(),
        p.outputs(),
        p.dim(),
        p.votes(),
        p.a_in().unwrap_or(&vec![1.0; p.inputs()]),
        p.h().unwrap_or(&vec![0.0; p.outputs() * p.dim()]),
    )
}

fn em_params(cfg: &RoutingConfig) -> EmParams {
    EmParams {
        lambda: cfg.effective_lambda(),
        eps: cfg.epsilon,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
    }
}

fn group_params(cfg: &RoutingConfig) -> GroupParams {
    GroupParams {
        alpha: cfg.alpha_g,
        beta: cfg.beta_g,
    }
}

/// The reference trace for any algorithm/family pair.
pub fn oracle_trace(p: &PredictionTensor, cfg: &RoutingConfig) -> Vec<Step> {
    let v = votes_of(p);
    let (i_n, j_n) = (p.inputs(), p.outputs());
    let r = cfg.iterations;
    let family = cfg.effective_family();
    let compose = |c: &Vec<Vec<f64>>| match family {
        Family::Dynamic => oracle::dynamic_output(&v, c),
        Family::Optim => oracle::optim_output(&v, c),
        Family::Em => oracle::em_output(&v, c, &em_params(cfg)),
        Family::Group => oracle::group_output(&v, c, &group_params(cfg)),
        Family::Attention => oracle::attention_output(&v, c),
    };
    match cfg.algorithm {
        Algorithm::Dynamic => oracle::dynamic(&v, r),
        Algorithm::Optim => oracle::optim(&v, r, cfg.effective_lambda()),
        Algorithm::Em => oracle::em(&v, r, &em_params(cfg)),
        Algorithm::Group => oracle::group(&v, r, &group_params(cfg)),
        Algorithm::Attention => oracle::attention(&v, r),
        Algorithm::Uniform => {
            let c = vec![vec![1.0 / j_n as f64; j_n]; i_n];
            vec![compose(&c); r + 1]
        }
        Algorithm::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            (0..=r)
                .map(|_| {
                    let c: Vec<Vec<f64>> = (0..i_n)
                        .map(|_| {
                            (0..j_n)
                                .map(|_| {
                                    cfg.random_low
                                        + (cfg.random_high - cfg.random_low) * rng.random::<f64>()
                                })
                                .collect()
                        })
                        .collect();
                    compose(&c)
                })
                .collect()
        }
    }
}

fn max_diff_m(a: &[Vec<f64>], flat: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(flat)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute deviation between library trace and oracle trace over
/// b, c, y, output activations and (EM) variances.
pub fn trace_deviation(res: &RoutingResult, reference: &[Step]) -> f64 {
    assert_eq!(res.trace.len(), reference.len(), "trace lengths differ");
    let mut worst: f64 = 0.0;
    for (s, o) in res.trace.iter().zip(reference) {
        worst = worst.max(max_diff_m(&o.b, s.b.as_slice()));
        worst = worst.max(max_diff_m(&o.c, s.c.as_slice()));
        worst = worst.max(max_diff_m(&o.y, s.y.as_slice()));
        worst = worst.max(max_diff_m(&[o.a_out.clone()], &s.a_out));
        if let (Some(a), Some(b)) = (&o.sigma2, &s.sigma2) {
            worst = worst.max(max_diff_m(a, b.as_slice()));
        }
    }
    worst
}

/// Every algorithm (baselines once per family) on one instance.
pub fn all_configs(iterations: usize, seed: u64) -> Vec<RoutingConfig> {
    let mut out: Vec<RoutingConfig> = Family::ALL
        .iter()
        .map(|&f| RoutingConfig::new(f.into(), iterations))
        .collect();
    for f in Family::ALL {
        out.push(RoutingConfig::baseline(Algorithm::Uniform, f, iterations));
        out.push(RoutingConfig::baseline(Algorithm::Random, f, iterations).with_seed(seed));
    }
    out
}

pub fn oracle_deviation(p: &PredictionTensor, cfg: &RoutingConfig) -> f64 {
    let res = route(p, cfg).expect("routing succeeds");
    trace_deviation(&res, &oracle_trace(p, cfg))
}

mod common;

use capsule_routing::routing::{
    gaussian_prediction, route, route_attention, route_dynamic, route_em, route_group,
    route_optim, route_random, route_uniform, Algorithm, Family, PredictionTensor,
    RoutingConfig, RoutingError, RoutingResult,
};
use common::{all_configs, instance, oracle_deviation};
use proptest::prelude::*;

fn row_sums(m: &capsule_routing::numerics::Mat) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().sum()).collect()
}

#[test]
fn every_algorithm_matches_its_oracle() {
    for (shape, seed) in [((2, 2, 2), 11), ((3, 2, 4), 12), ((5, 3, 4), 13)] {
        let p = instance(shape.0, shape.1, shape.2, seed);
        for iters in [0, 1, 3, 6] {
            for cfg in all_configs(iters, seed) {
                let dev = oracle_deviation(&p, &cfg);
                assert!(
                    dev < 1e-10,
                    "{:?} {}/{:?} iters {iters}: deviation {dev}",
                    shape,
                    cfg.algorithm,
                    cfg.family
                );
            }
        }
    }
}

#[test]
fn em_oracle_with_full_activations() {
    let base = instance(3, 2, 4, 5);
    let p = PredictionTensor::new(3, 2, 4, base.votes().to_vec())
        .unwrap()
        .with_activations(vec![1.0; 3])
        .unwrap();
    let cfg = RoutingConfig::new(Algorithm::Em, 2);
    assert_eq!(cfg.effective_lambda(), 0.01);
    assert!(oracle_deviation(&p, &cfg) < 1e-10);
}

#[test]
fn zero_iterations_returns_only_the_initial_state() {
    let p = instance(4, 3, 5, 1);
    for cfg in all_configs(0, 1) {
        let res = route(&p, &cfg).unwrap();
        assert_eq!(res.trace.len(), 1);
        assert_eq!(res.iterations_used, 0);
    }
}

#[test]
fn zero_iterations_equal_uniform_composition() {
    let p = instance(6, 3, 4, 2);
    for f in [Family::Dynamic, Family::Optim, Family::Em, Family::Group] {
        let routed = route(&p, &RoutingConfig::new(f.into(), 0)).unwrap();
        let uniform = route(&p, &RoutingConfig::baseline(Algorithm::Uniform, f, 0)).unwrap();
        assert_eq!(routed.y, uniform.y, "{f}");
        assert_eq!(routed.a_out, uniform.a_out, "{f}");
    }
}

#[test]
fn uniform_is_iteration_invariant() {
    let p = instance(4, 2, 3, 3);
    for f in Family::ALL {
        let a = route_uniform(&p, &RoutingConfig::baseline(Algorithm::Uniform, f, 3)).unwrap();
        let b = route_uniform(&p, &RoutingConfig::baseline(Algorithm::Uniform, f, 10)).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.a_out, b.a_out);
        let first = &b.trace[0].c;
        assert!(b.trace.iter().all(|s| &s.c == first));
        if f != Family::Em {
            assert!(first.as_slice().iter().all(|&c| c == 0.5));
        }
    }
}

#[test]
fn uniform_ignores_a_dominant_vote() {
    let mut p = instance(4, 2, 3, 4);
    p.votes_mut()[0] = 50.0;
    let res = route_uniform(&p, &RoutingConfig::new(Algorithm::Uniform, 3)).unwrap();
    // dynamic family: squash of the plain 1/J-weighted sum
    for j in 0..2 {
        let mut s = vec![0.0; 3];
        for i in 0..4 {
            for (k, v) in p.vote(i, j).iter().enumerate() {
                s[k] += v / 2.0;
            }
        }
        let want = capsule_routing::numerics::squash(&s);
        for k in 0..3 {
            assert!((res.y.get(j, k) - want[k]).abs() < 1e-14);
        }
    }
}

#[test]
fn dynamic_single_pair() {
    let p = PredictionTensor::new(1, 1, 3, vec![0.3, -1.2, 2.0]).unwrap();
    let res = route_dynamic(&p, &RoutingConfig::new(Algorithm::Dynamic, 4)).unwrap();
    let want = capsule_routing::numerics::squash(&[0.3, -1.2, 2.0]);
    for s in &res.trace {
        assert_eq!(s.c.as_slice(), &[1.0]);
    }
    assert_eq!(res.y.row(0), want.as_slice());
}

#[test]
fn symmetric_votes_keep_links_uniform() {
    let (i_n, j_n, d) = (5, 4, 3);
    let base = instance(i_n, 1, d, 9);
    let mut u = Vec::new();
    for i in 0..i_n {
        for _ in 0..j_n {
            u.extend_from_slice(base.vote(i, 0));
        }
    }
    let p = PredictionTensor::new(i_n, j_n, d, u).unwrap();
    let res = route_dynamic(&p, &RoutingConfig::new(Algorithm::Dynamic, 20)).unwrap();
    for s in &res.trace {
        assert!(s.c.as_slice().iter().all(|&c| c == 0.25));
    }
}

#[test]
fn em_identical_votes_collapse_to_the_floor() {
    let vote = [0.4, -0.7, 1.1, 0.2];
    let u: Vec<f64> = (0..6).flat_map(|_| vote).collect();
    let p = PredictionTensor::new(3, 2, 4, u)
        .unwrap()
        .with_activations(vec![0.6; 3])
        .unwrap();
    let res = route_em(&p, &RoutingConfig::new(Algorithm::Em, 3)).unwrap();
    let s2 = res.sigma2.as_ref().unwrap();
    assert!(s2.as_slice().iter().all(|&v| (v - 0.01).abs() < 1e-12));
    for j in 0..2 {
        for (k, v) in vote.iter().enumerate() {
            assert!((res.y.get(j, k) - v).abs() < 1e-12);
        }
    }
    assert!(res.degenerate.is_empty());
}

#[test]
fn em_dead_inputs_are_degenerate_everywhere() {
    let p = instance(3, 2, 4, 8);
    let p = PredictionTensor::new(3, 2, 4, p.votes().to_vec())
        .unwrap()
        .with_activations(vec![0.0; 3])
        .unwrap();
    let res = route_em(&p, &RoutingConfig::new(Algorithm::Em, 2)).unwrap();
    assert_eq!(res.degenerate, vec![0, 1]);
    for s in &res.trace {
        assert!(s.c.as_slice().iter().all(|&c| c == 0.0));
        assert!(s.y.as_slice().iter().all(|&c| c == 0.0));
    }
}

#[test]
fn em_rows_of_b_sum_to_one_and_variance_respects_floor() {
    let p = instance(8, 4, 6, 21);
    let res = route_em(&p, &RoutingConfig::new(Algorithm::Em, 5)).unwrap();
    for s in &res.trace[1..] {
        for sum in row_sums(&s.b) {
            assert!((sum - 1.0).abs() < 1e-10);
        }
        assert!(s.sigma2.as_ref().unwrap().as_slice().iter().all(|&v| v >= 0.01));
    }
}

#[test]
fn em_needs_positive_epsilon() {
    let p = instance(3, 2, 4, 8);
    let cfg = RoutingConfig {
        epsilon: 0.0,
        ..RoutingConfig::new(Algorithm::Em, 2)
    };
    assert!(matches!(route(&p, &cfg), Err(RoutingError::ConfigMismatch(_))));
}

#[test]
fn optim_with_zero_lambda_is_uniform() {
    let p = instance(6, 3, 4, 22);
    let cfg = RoutingConfig {
        lambda: Some(0.0),
        ..RoutingConfig::new(Algorithm::Optim, 5)
    };
    let res = route_optim(&p, &cfg).unwrap();
    let uni = route(&p, &RoutingConfig::baseline(Algorithm::Uniform, Family::Optim, 5)).unwrap();
    for s in &res.trace {
        assert!(s.c.as_slice().iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
    }
    assert!(res.y.max_abs_diff(&uni.y) < 1e-15);
}

#[test]
fn optim_single_pair_weight() {
    let p = PredictionTensor::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
    let res = route_optim(&p, &RoutingConfig::new(Algorithm::Optim, 3)).unwrap();
    // w = 5 / 6
    assert!((res.y.get(0, 0) - 2.5).abs() < 1e-14);
    assert!((res.y.get(0, 1) - 10.0 / 3.0).abs() < 1e-14);
}

#[test]
fn optim_zero_output_gives_zero_agreement() {
    let p = PredictionTensor::new(2, 2, 2, vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
    let res = route_optim(&p, &RoutingConfig::new(Algorithm::Optim, 2)).unwrap();
    assert!(res.y.is_finite());
    for s in &res.trace {
        assert_eq!(s.b.get(0, 1), 0.0);
    }
}

#[test]
fn group_identical_votes() {
    let vote = [1.0, -2.0, 0.5];
    let u: Vec<f64> = (0..8).flat_map(|_| vote).collect();
    let p = PredictionTensor::new(4, 2, 3, u)
        .unwrap()
        .with_activations(vec![0.5; 4])
        .unwrap();
    let cfg = RoutingConfig {
        beta_g: 0.3,
        ..RoutingConfig::new(Algorithm::Group, 3)
    };
    let res = route_group(&p, &cfg).unwrap();
    let s = capsule_routing::numerics::logistic(0.3);
    for snap in &res.trace {
        for j in 0..2 {
            for (k, v) in vote.iter().enumerate() {
                assert!((snap.y.get(j, k) - v).abs() < 1e-14);
            }
            assert!((snap.a_out[j] - s).abs() < 1e-15);
        }
    }
    for snap in &res.trace[1..] {
        assert!(snap.c.as_slice().iter().all(|&c| (c - s).abs() < 1e-15));
    }
}

#[test]
fn group_without_distance_term_is_iteration_independent() {
    let p = instance(5, 3, 4, 23);
    let cfg = |r| RoutingConfig {
        alpha_g: 0.0,
        ..RoutingConfig::new(Algorithm::Group, r)
    };
    let a = route_group(&p, &cfg(1)).unwrap();
    let b = route_group(&p, &cfg(7)).unwrap();
    assert!(a.y.max_abs_diff(&b.y) < 1e-14);
    assert!(a.y.max_abs_diff(&b.trace[0].y) < 1e-14);
}

#[test]
fn attention_single_step_from_zero() {
    let p = instance(4, 2, 3, 24);
    let p = PredictionTensor::new(4, 2, 3, p.votes().to_vec())
        .unwrap()
        .with_side_input(vec![0.0; 6])
        .unwrap();
    let res = route_attention(&p, &RoutingConfig::new(Algorithm::Attention, 1)).unwrap();
    for j in 0..2 {
        for k in 0..3 {
            let want: f64 = (0..4).map(|i| p.vote(i, j)[k] / 2.0).sum();
            assert!((res.y.get(j, k) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_without_votes_keeps_initial_pose() {
    let h: Vec<f64> = (0..6).map(|k| k as f64 * 0.1 - 0.2).collect();
    let p = PredictionTensor::new(3, 2, 3, vec![0.0; 18])
        .unwrap()
        .with_side_input(h.clone())
        .unwrap();
    let res = route_attention(&p, &RoutingConfig::new(Algorithm::Attention, 5)).unwrap();
    assert_eq!(res.y.as_slice(), h.as_slice());
    for s in &res.trace {
        assert!(s.c.as_slice().iter().all(|&c| c == 0.5));
    }
}

#[test]
fn missing_inputs_are_reported() {
    let p = PredictionTensor::new(2, 2, 2, vec![0.1; 8]).unwrap();
    for a in [Algorithm::Em, Algorithm::Group] {
        assert_eq!(
            route(&p, &RoutingConfig::new(a, 1)).unwrap_err(),
            RoutingError::MissingActivations
        );
    }
    assert_eq!(
        route(&p, &RoutingConfig::new(Algorithm::Attention, 1)).unwrap_err(),
        RoutingError::MissingSideInput
    );
    let uniform_em = RoutingConfig::baseline(Algorithm::Uniform, Family::Em, 1);
    assert_eq!(route(&p, &uniform_em).unwrap_err(), RoutingError::MissingActivations);
    let mismatch = RoutingConfig::new(Algorithm::Dynamic, 1).with_family(Family::Em);
    assert!(matches!(route(&p, &mismatch), Err(RoutingError::ConfigMismatch(_))));
}

#[test]
fn random_is_seeded_and_centred() {
    let p = instance(50, 10, 2, 25);
    let cfg = RoutingConfig::new(Algorithm::Random, 199).with_seed(42);
    let a = route_random(&p, &cfg).unwrap();
    let b = route_random(&p, &cfg).unwrap();
    assert_eq!(a, b);
    let draws: Vec<f64> = a.trace.iter().flat_map(|s| s.c.as_slice().to_vec()).collect();
    assert_eq!(draws.len(), 100_000);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 1.0).abs() < 0.005, "mean {mean}");
    assert!(draws.iter().all(|&c| (0.8..1.2).contains(&c)));
    let other = route_random(&p, &cfg.clone().with_seed(43)).unwrap();
    assert_ne!(a.y, other.y);
}

#[test]
fn random_midpoint_is_uniform_scaled_by_outputs() {
    let p = instance(5, 4, 3, 26);
    for f in Family::ALL {
        let cfg = RoutingConfig {
            random_low: 1.0,
            random_high: 1.0,
            ..RoutingConfig::baseline(Algorithm::Random, f, 3)
        };
        let rnd = route(&p, &cfg).unwrap();
        let uni = route(&p, &RoutingConfig::baseline(Algorithm::Uniform, f, 3)).unwrap();
        let last = rnd.final_snapshot();
        let scaled: Vec<f64> = uni.trace[0].c.as_slice().iter().map(|c| c * 4.0).collect();
        assert!(capsule_routing::numerics::max_abs_diff(last.c.as_slice(), &scaled) < 1e-15);
        if f == Family::Group {
            // the weighted mean is invariant to a common scale of the links
            assert!(rnd.y.max_abs_diff(&uni.y) < 1e-12);
        }
    }
}

#[test]
fn results_round_trip_through_json() {
    let p = gaussian_prediction(3, 2, 4, 1.0, 27);
    let back = PredictionTensor::from_json(&p.to_json()).unwrap();
    assert_eq!(back, p);
    let res = route_em(&p, &RoutingConfig::new(Algorithm::Em, 2)).unwrap();
    let parsed: RoutingResult = serde_json::from_str(&res.to_json()).unwrap();
    assert_eq!(parsed, res);
}

#[test]
fn malformed_prediction_json_is_rejected() {
    let ragged = r#"{"I":2,"J":1,"d":2,"u":[[[1,2]],[[3]]]}"#;
    assert!(PredictionTensor::from_json(ragged).is_err());
    let bad_a = r#"{"I":1,"J":1,"d":1,"u":[[[1]]],"a_in":[1.5]}"#;
    assert!(PredictionTensor::from_json(bad_a).is_err());
    let ok = r#"{"I":1,"J":2,"d":1,"u":[[[1],[2]]],"h":[[0.5],[0.25]]}"#;
    let p = PredictionTensor::from_json(ok).unwrap();
    assert_eq!(p.h(), Some(&[0.5, 0.25][..]));
}

#[test]
fn convergence_mode_stops_early() {
    let p = instance(8, 3, 8, 28);
    let cfg = RoutingConfig::new(Algorithm::Dynamic, 0).converging(1e-8, 1000);
    let res = route(&p, &cfg).unwrap();
    assert!(res.converged);
    assert!(res.iterations_used < 1000);
    let n = res.trace.len();
    assert!(res.trace[n - 1].c.max_abs_diff(&res.trace[n - 2].c) < 1e-8);
    let uni = route(&p, &RoutingConfig::new(Algorithm::Uniform, 0).converging(1e-8, 1000)).unwrap();
    assert!(uni.converged);
    assert_eq!(uni.iterations_used, 0);
}

fn small_instance() -> impl Strategy<Value = PredictionTensor> {
    (1usize..6, 1usize..5, 1usize..5, any::<u64>())
        .prop_map(|(i, j, d, seed)| gaussian_prediction(i, j, d, 1.0, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_families_keep_rows_normalised(p in small_instance(), iters in 0usize..8) {
        for f in [Family::Dynamic, Family::Optim, Family::Attention] {
            let res = route(&p, &RoutingConfig::new(f.into(), iters)).unwrap();
            for s in &res.trace {
                for sum in row_sums(&s.c) {
                    prop_assert!((sum - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn em_invariants_hold(p in small_instance(), iters in 1usize..6) {
        let res = route(&p, &RoutingConfig::new(Algorithm::Em, iters)).unwrap();
        for s in &res.trace[1..] {
            for sum in row_sums(&s.b) {
                prop_assert!((sum - 1.0).abs() < 1e-10);
            }
        }
        for s in &res.trace {
            prop_assert!(s.sigma2.as_ref().unwrap().as_slice().iter().all(|&v| v >= 0.01));
        }
    }

    #[test]
    fn routing_is_deterministic(p in small_instance(), iters in 0usize..5, seed in any::<u64>()) {
        for cfg in all_configs(iters, seed) {
            let a = route(&p, &cfg).unwrap();
            let b = route(&p, &cfg).unwrap();
            prop_assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn baselines_ignore_input_order(p in small_instance(), shift in 1usize..5) {
        let (i_n, j_n, d) = (p.inputs(), p.outputs(), p.dim());
        let perm: Vec<usize> = (0..i_n).map(|i| (i + shift) % i_n).collect();
        let mut u = Vec::new();
        let mut a = Vec::new();
        for &i in &perm {
            for j in 0..j_n {
                u.extend_from_slice(p.vote(i, j));
            }
            a.push(p.a_in().unwrap()[i]);
        }
        let q = PredictionTensor::new(i_n, j_n, d, u).unwrap()
            .with_activations(a).unwrap()
            .with_side_input(p.h().unwrap().to_vec()).unwrap();
        for f in Family::ALL {
            for cfg in [
                RoutingConfig::baseline(Algorithm::Uniform, f, 2),
                RoutingConfig { random_low: 1.0, random_high: 1.0, ..RoutingConfig::baseline(Algorithm::Random, f, 2) },
            ] {
                let x = route(&p, &cfg).unwrap();
                let y = route(&q, &cfg).unwrap();
                prop_assert!(x.y.max_abs_diff(&y.y) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_iteration_routing_is_the_uniform_baseline(p in small_instance()) {
        for f in [Family::Dynamic, Family::Optim, Family::Em, Family::Group] {
            let r = route(&p, &RoutingConfig::new(f.into(), 0)).unwrap();
            let u = route(&p, &RoutingConfig::baseline(Algorithm::Uniform, f, 0)).unwrap();
            prop_assert_eq!(r.y, u.y);
        }
    }
}

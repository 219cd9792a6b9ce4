use capsule_routing::routing::{gaussian_prediction, PredictionTensor};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capsroute"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pred_32x5x16.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A config small enough to train in well under a second.
const SMALL: &str = r#"{
  "schema_version": 1,
  "dataset": {"classes": 3, "parts": 3, "noise": 0.3, "train_samples": 120, "eval_samples": 60},
  "model": {"features": 8, "capsules": 4, "dim": 4},
  "train": {"epochs": 3, "batch_size": 16, "schedule": {"kind": "constant", "lr": 0.05}},
  "families": ["dynamic", "optim"],
  "q1_iterations": [2, 3],
  "q4_iterations": [2, 3],
  "seeds": [0, 1, 2]
}"#;

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn shipped_fixture_is_the_seed_zero_instance() {
    let text = fs::read_to_string(fixture()).unwrap();
    let shipped = PredictionTensor::from_json(&text).unwrap();
    assert_eq!(shipped, gaussian_prediction(32, 5, 16, 1.0, 0));
}

#[test]
fn route_with_zero_iterations_gives_the_uniform_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["route", "--input", p(&fixture()), "--algo", "dynamic", "--iters", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 1);
    let uniform = dir.path().join("u.json");
    let o = run(&["route", "--input", p(&fixture()), "--algo", "uniform", "--iters", "0", "--out", p(&uniform)]);
    assert_eq!(code(&o), 0);
    let u: serde_json::Value = serde_json::from_str(&fs::read_to_string(&uniform).unwrap()).unwrap();
    assert_eq!(v["y"], u["y"]);
    assert_eq!(v["trace"][0]["c"], u["trace"][0]["c"]);
}

#[test]
fn sweep_on_the_fixture_polarizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let hist = dir.path().join("hist.csv");
    let o = run(&[
        "sweep", "--input", p(&fixture()), "--algo", "dynamic", "--iters", "1,3,10,100", "--out", p(&out),
        "--histogram-out", p(&hist),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let row = csv.lines().find(|l| l.starts_with("100,")).expect("row for 100 iterations");
    let fraction: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!(fraction >= 0.95, "{row}");
    // 4 iteration counts × 50 bins plus the header
    assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 201);
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["route", "--input", p(&fixture()), "--frobnicate", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["route", "--help"])), 0);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["route", "--input", p(&dir.path().join("nope.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn steady_reports_non_convergence_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let o = run(&["steady", "--input", p(&fixture()), "--cap", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn steady_converges_on_a_generic_instance() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pred.json");
    fs::write(&input, gaussian_prediction(16, 5, 16, 1.0, 3).to_json()).unwrap();
    let out = dir.path().join("s.json");
    let o = run(&["steady", "--input", p(&input), "--algo", "dynamic", "--tol", "1e-8", "--cap", "1000", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["converged"], true);
    assert_eq!(v["steady_condition_holds"], true);
}

#[test]
fn grad_check_passes_for_em() {
    let o = run(&["grad-check", "--seed", "7", "--algo", "em"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for r in v.as_array().unwrap() {
        assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    }
    let o = run(&["grad-check", "--algo", "dynamic", "--iters", "3", "--block"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn train_swap_and_agreement_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let fit_a = dir.path().join("a.json");
    let fit_b = dir.path().join("b.json");
    let csv = dir.path().join("epochs.csv");
    for out in [&fit_a, &fit_b] {
        let o = run(&["train", "--config", p(&cfg), "--out", p(out), "--epochs-csv", p(&csv)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&fit_a).unwrap(), fs::read(&fit_b).unwrap());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);

    let swap = dir.path().join("swap.json");
    let o = run(&["swap-eval", "--model", p(&fit_a), "--eval-algo", "uniform", "--config", p(&cfg), "--out", p(&swap)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&swap).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&v["swapped_accuracy"].as_f64().unwrap()));

    let o = run(&["agreement", "--config", p(&cfg), "--model", p(&fit_a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let total: f64 = ["both_correct", "only_a", "only_b", "both_wrong"]
        .iter()
        .map(|k| v[k].as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn diverging_training_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        SMALL.replace(r#""lr": 0.05}"#, r#""lr": 1e300}, "clip_norm": null"#),
    )
    .unwrap();
    let out = dir.path().join("fit.json");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn bad_config_prints_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"schema_version": 7}"#).unwrap();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("schema_version") && err.contains("\"dataset\""), "{err}");
}

#[test]
fn tables_are_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for which in ["q1", "q4"] {
        let o = run(&[which, "--config", p(&cfg), "--out", p(&a)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = run(&[which, "--config", p(&cfg), "--out", p(&b), "--jobs", "3"]);
        assert_eq!(code(&o), 0);
        for ext in ["csv", "txt", "json"] {
            let name = format!("{which}.{ext}");
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
        }
    }
    let csv = fs::read_to_string(a.join("q1.csv")).unwrap();
    // 2 families × 4 settings × 3 seeds
    assert_eq!(csv.lines().count(), 1 + 2 * 4 * 3);
    let csv = fs::read_to_string(a.join("q4.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6 * 3);
}

#[test]
fn fig1_writes_a_partitioned_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("fig");
    let o = run(&["fig1", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("fig1.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let v: Vec<f64> = r.split(',').skip(1).take(4).map(|x| x.parse().unwrap()).collect();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{r}");
    }
}

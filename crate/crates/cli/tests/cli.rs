use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iapf_core::hmm::build_banded_linear_gaussian;
use iapf_core::{derive_seed, rng_from_seed};
use serde_json::Value;

fn iapf(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_iapf"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

const BENCH: &str = r#"{"dims": [1, 2], "length": 15, "data_seed": 3,
  "estimators": [{"type": "bpf", "n": 200}, {"type": "iapf", "n0": 50, "k": 2}]}"#;

#[test]
fn single_particle_single_step_filter_is_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "f.json",
        r#"{"model": {"kind": "banded_linear_gaussian", "dim": 1, "alpha": 0.42},
            "data": {"simulate": {"length": 1, "seed": 4}},
            "estimator": {"type": "bpf", "n": 1}}"#,
    );
    let out = iapf(&["filter", "--config", cfg.to_str().unwrap(), "--seed", "11", "--no-timing"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap()).unwrap();

    let space = build_banded_linear_gaussian(1, 0.42).unwrap();
    let (_, obs) = space.simulate(1, &mut rng_from_seed(4));
    let model = space.bind(obs).unwrap();
    let mut x = [0.0];
    model.initial().sample_into(&mut rng_from_seed(derive_seed(11, 0)), &mut x);
    assert_eq!(first["log_z"].as_f64().unwrap(), model.log_g(0, &x));
    assert_eq!(first["resampling_count"].as_u64(), Some(0));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.json", BENCH);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = iapf(
            &["bench-dim", "--config", cfg.to_str().unwrap(), "--replicates", "4", "--threads", threads, "--no-timing", "--out", out.to_str().unwrap()],
            &[],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(out.join("records.jsonl")).unwrap(), std::fs::read(out.join("summary.json")).unwrap())
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "2");
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn bench_dim_summary_recomputes_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.json", BENCH);
    let out = dir.path().join("o");
    let o = iapf(&["bench-dim", "--config", cfg.to_str().unwrap(), "--replicates", "5", "--seed", "2", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_lines(&out.join("records.jsonl"));
    let summary = read_json(&out.join("summary.json"));
    let groups = summary["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 4);
    assert_eq!(records.len(), 20);
    for g in groups {
        let rows: Vec<&Value> = records.iter().filter(|r| r["dim"] == g["dim"] && r["estimator"] == g["estimator"]).collect();
        assert_eq!(rows.len(), 5);
        let truth = g["log_z_true"].as_f64().unwrap();
        let lz: Vec<f64> = rows.iter().map(|r| r["log_z"].as_f64().unwrap()).collect();
        let ratios: Vec<f64> = lz.iter().map(|l| (l - truth).exp()).collect();
        let counts: Vec<f64> = rows.iter().map(|r| r["resampling_count"].as_f64().unwrap()).collect();
        assert_eq!(g["mean_log_z"].as_f64().unwrap(), mean_sd(&lz).0);
        assert_eq!(g["sd_log_z"].as_f64().unwrap(), mean_sd(&lz).1);
        assert_eq!(g["sd_ratio"].as_f64().unwrap(), mean_sd(&ratios).1);
        assert_eq!(g["mean_resampling_count"].as_f64().unwrap(), mean_sd(&counts).0);
        assert!(rows.iter().all(|r| r["wall_time_ms"].is_number()));
    }
    // Replicate seeds do not depend on the replicate count.
    assert_eq!(records[0]["seed"].as_u64(), Some(derive_seed(2, 0)));
    assert_eq!(records[4]["seed"].as_u64(), Some(derive_seed(2, 4)));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(
        dir.path(),
        "u.json",
        r#"{"dims": [1], "estimators": [{"type": "bpf", "n": 10}], "colour": "red"}"#,
    );
    assert_eq!(iapf(&["bench-dim", "--config", unknown.to_str().unwrap()], &[]).status.code(), Some(2));
    let nested = write_config(dir.path(), "n.json", r#"{"dims": [1], "estimators": [{"type": "bpf", "n": 10, "m": 1}]}"#);
    assert_eq!(iapf(&["bench-dim", "--config", nested.to_str().unwrap()], &[]).status.code(), Some(2));
    let invalid = write_config(dir.path(), "i.json", r#"{"dims": [1], "estimators": [{"type": "bpf", "n": 10, "kappa": 2.0}]}"#);
    assert_eq!(iapf(&["bench-dim", "--config", invalid.to_str().unwrap()], &[]).status.code(), Some(2));
    assert_eq!(iapf(&["bench-dim"], &[]).status.code(), Some(2));
    assert_eq!(iapf(&["bench-dim", "--config", "/nonexistent.json"], &[]).status.code(), Some(2));
    let ok = write_config(dir.path(), "b.json", BENCH);
    assert_eq!(iapf(&["bench-dim", "--config", ok.to_str().unwrap(), "--threads", "0"], &[]).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "i.json",
        r#"{"model": {"kind": "banded_linear_gaussian", "dim": 1, "alpha": 0.42},
            "data": {"simulate": {"length": 10, "seed": 1}},
            "iapf": {"n0": 20, "k": 1, "tau": 1e-12, "l_max": 3}}"#,
    );
    let out = dir.path().join("o");
    let o = iapf(&["iapf", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    let records = read_lines(&out.join("records.jsonl"));
    assert!(records[0]["error"].is_string() && records[0]["log_z"].is_null());
}

#[test]
fn iapf_writes_a_trace_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "i.json",
        r#"{"model": {"kind": "family", "family": {"family": "univariate_sv"}, "theta": [0.95, 0.2, 0.7]},
            "data": {"simulate": {"length": 30, "seed": 1}},
            "iapf": {"n0": 100, "tau": 1e6}}"#,
    );
    let out = dir.path().join("o");
    let o = iapf(&["iapf", "--config", cfg.to_str().unwrap(), "--replicates", "2", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = read_lines(&out.join("trace.jsonl"));
    // A vacuous tolerance stops at the first check, l = k + 1.
    assert_eq!(trace.len(), 2 * 5);
    assert!(trace.iter().all(|r| r["log_z"].is_number()));
    assert_eq!(trace[0]["N"].as_u64(), Some(100));
    assert_eq!(trace[5]["replicate"].as_u64(), Some(1));
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["groups"][0].get("log_z_true").is_none());
}

#[test]
fn environment_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.json", BENCH);
    let a = iapf(&["bench-dim", "--config", cfg.to_str().unwrap(), "--seed", "9", "--no-timing"], &[]);
    let b = iapf(&["bench-dim"], &[("IAPF_CONFIG", cfg.to_str().unwrap()), ("IAPF_SEED", "9"), ("IAPF_NO_TIMING", "true")]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn pmmh_writes_chain_csv_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "p.json",
        r#"{"model": {"kind": "family", "family": {"family": "scalar_linear_gaussian", "delta": 0.25}, "theta": [0.9]},
            "data": {"simulate": {"length": 30, "seed": 2}},
            "chain_length": 500, "estimator": {"type": "kalman"}, "theta0": [0.5]}"#,
    );
    let out = dir.path().join("o");
    let o = iapf(&["pmmh", "--config", cfg.to_str().unwrap(), "--replicates", "2", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("chain_1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 501);
    let summary = read_json(&out.join("summary.json"));
    let chains = summary["chains"].as_array().unwrap();
    assert_eq!(chains.len(), 2);
    let rate = chains[0]["acceptance_rates"][0].as_f64().unwrap();
    assert!(rate > 0.0 && rate < 1.0);
    assert!(chains[0]["iact"][0].as_f64().unwrap() >= 1.0);
    // The chain mean recomputes from the CSV.
    let csv0 = std::fs::read_to_string(out.join("chain_0.csv")).unwrap();
    let col: Vec<f64> = csv0.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(chains[0]["posterior_means"][0].as_f64().unwrap(), col.iter().sum::<f64>() / col.len() as f64);
}

#[test]
fn profile_records_every_point_and_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "p.json",
        r#"{"model": {"kind": "family", "family": {"family": "univariate_sv"}, "theta": [0.984, 0.145, 0.69]},
            "data": {"simulate": {"length": 40, "seed": 5}},
            "points": [[0.984, 0.145, 0.69], [0.97, 0.145, 0.69]],
            "estimators": [{"type": "bpf", "n": 100}, {"type": "iapf", "n0": 50, "tau": 1e6}]}"#,
    );
    let out = dir.path().join("o");
    let o = iapf(&["profile", "--config", cfg.to_str().unwrap(), "--replicates", "3", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_lines(&out.join("records.jsonl"));
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r["log_z"].as_f64().unwrap().is_finite() && r["point"].is_u64()));
    let bad = write_config(
        dir.path(),
        "b.json",
        r#"{"model": {"kind": "family", "family": {"family": "univariate_sv"}},
            "data": {"simulate": {"length": 4, "seed": 5}},
            "points": [[0.9, 0.1]], "estimators": [{"type": "bpf", "n": 10}]}"#,
    );
    assert_eq!(iapf(&["profile", "--config", bad.to_str().unwrap()], &[]).status.code(), Some(2));
}

#[test]
fn smooth_compares_against_the_kalman_smoother() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"model": {"kind": "banded_linear_gaussian", "dim": 1, "alpha": 0.9},
            "data": {"simulate": {"length": 20, "seed": 6}},
            "estimator": {"type": "bpf", "n": 2000}}"#,
    );
    let out = dir.path().join("o");
    let o = iapf(&["smooth", "--config", cfg.to_str().unwrap(), "--replicates", "20", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    let steps = summary["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 20);
    for s in steps {
        let (mean, sd, k) = (s["mean"].as_f64().unwrap(), s["mc_sd"].as_f64().unwrap(), s["kalman"].as_f64().unwrap());
        assert!((mean - k).abs() < 5.0 * sd / 20f64.sqrt() + 1e-3, "{s}");
    }
}

#[test]
fn prepare_returns_is_mean_corrected() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_config(dir.path(), "prices.csv", "usd,gbp\n1.0,2.0\n1.1,2.0\n1.0,2.2\n1.2,2.1\n");
    let out = dir.path().join("returns.csv");
    let o = iapf(&["prepare-returns", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for j in 0..2 {
        assert!(rows.iter().map(|r| r[j]).sum::<f64>().abs() < 1e-9);
    }
    let raw = [(1.1f64).ln(), (1.0f64 / 1.1).ln(), (1.2f64).ln()];
    let m = raw.iter().sum::<f64>() / 3.0;
    assert!((rows[0][0] - 100.0 * (raw[0] - m)).abs() < 1e-9);
}

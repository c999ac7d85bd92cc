use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn assim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_assim"))
        .args(args)
        .output()
        .expect("spawn assim")
}

fn run_ok(cmd: &str, config: &Path, extra: &[&str]) {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = assim(&args);
    assert!(
        out.status.success(),
        "assim {cmd} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, value: Value) -> PathBuf {
    let path = dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn quick_fbovi() -> Value {
    json!({
        "method": "fbovi",
        "n_targets": 64,
        "pretrain_steps": 100,
        "pretrain_samples": 64,
        "stage1": {"steps": 60, "s_mc": 16, "final_samples": 64},
        "stage2": {"epochs": 20}
    })
}

fn toy_config(out: &Path) -> Value {
    json!({
        "experiment": "scalar-toy",
        "realizations": 2,
        "steps": 3,
        "output_dir": out,
        "summary": {"samples": 200},
        "methods": [quick_fbovi(), {"method": "jpf", "particles": 500}, {"method": "jukf"}, {"method": "jenkf", "members": 50}],
        "bound": {"psi_samples": 200, "z_samples": 200},
        "oracle": {"steps": [0, 2], "dram": {"n_samples": 4000}}
    })
}

/// Every file under `root` except the timing sidecars, by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timings.jsonl" {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(tmp.path(), toy_config(&out));
    for cmd in ["generate", "run", "metrics", "bound", "oracle"] {
        run_ok(cmd, &config, &["--workers", "2"]);
    }

    assert!(out.join("config.json").exists());
    for i in 0..2 {
        let stream = read_json(&out.join(format!("data/realization-{i:03}.json")));
        assert_eq!(stream["observations"].as_array().unwrap().len(), 3);
    }
    for method in ["fbovi", "jpf", "jukf", "jenkf"] {
        let dir = out.join("runs").join(method);
        let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("metric,component,step,value,n_realizations"));
        assert!(csv.contains("rmse_theta,theta1,3,"), "{method}: {csv}");
        assert!(csv.contains("rmse_state,x1,3,"));
        assert_eq!(read_json(&dir.join("metrics-flags.json")), json!([]));
        let steps = fs::read_to_string(dir.join("realization-000/steps.jsonl")).unwrap();
        assert_eq!(steps.lines().count(), 4, "{method}: prior record plus three steps");
    }

    let report = read_json(&out.join("runs/fbovi/realization-000/bound-report.json"));
    let reports = report["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for (k, r) in reports.iter().enumerate() {
        assert_eq!(r["k"], json!(k + 1));
        assert_eq!(r["terms"].as_array().unwrap().len(), k + 1);
    }
    let dominance = report["dominance"].as_array().unwrap();
    assert_eq!(dominance.len(), 3);
    for d in dominance {
        assert!(d["grid_distance"].as_f64().unwrap() >= 0.0);
        assert!(d["bound"].as_f64().unwrap().is_finite());
    }

    let prior = read_json(&out.join("oracle/realization-000/k-000/stats.json"));
    assert_eq!(prior["stats"]["kept"], json!(1000));
    // state prior N(1, 0.5), θ prior N(0.5, 0.25), 1000 draws
    let mean = prior["mean"].as_array().unwrap();
    assert!((mean[0].as_f64().unwrap() - 1.0).abs() < 4.0 * (0.5f64 / 1000.0).sqrt());
    assert!((mean[1].as_f64().unwrap() - 0.5).abs() < 4.0 * (0.25f64 / 1000.0).sqrt());
    let bytes = fs::metadata(out.join("oracle/realization-000/k-002/samples.bin")).unwrap().len();
    assert_eq!(bytes, 1000 * 2 * 8);
    assert!(!out.join("oracle/realization-001").exists());
}

#[test]
fn rerun_is_byte_identical_apart_from_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut value = toy_config(&out);
    value["realizations"] = json!(1);
    let config = write_config(tmp.path(), value);
    let all = ["generate", "run", "metrics", "bound", "oracle"];
    for cmd in all {
        run_ok(cmd, &config, &[]);
    }
    let first = snapshot(&out);
    assert!(first.keys().any(|p| p.ends_with("steps.jsonl")));
    for cmd in all {
        run_ok(cmd, &config, &["--workers", "3"]);
    }
    let second = snapshot(&out);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        assert!(bytes == &second[path], "{} differs between runs", path.display());
    }
    assert!(out.join("runs/fbovi/realization-000/timings.jsonl").exists());
}

#[test]
fn seed_and_method_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut value = toy_config(&out);
    value["realizations"] = json!(1);
    let config = write_config(tmp.path(), value);
    let alt = tmp.path().join("alt");
    let alt_s = alt.to_str().unwrap();
    run_ok("generate", &config, &[]);
    run_ok("generate", &config, &["--seed", "7", "--out", alt_s]);
    let a = read_json(&out.join("data/realization-000.json"));
    let b = read_json(&alt.join("data/realization-000.json"));
    assert_eq!(a["header"]["seed"], json!(0));
    assert_eq!(b["header"]["seed"], json!(7));
    assert_ne!(a["observations"], b["observations"]);

    expect_code(
        &["run", "--config", config.to_str().unwrap(), "--method", "jukf", "--out", alt_s],
        2,
        "generated with seed 7",
    );
    run_ok("run", &config, &["--method", "jukf", "--out", alt_s, "--seed", "7"]);
    assert!(alt.join("runs/jukf/realization-000/summary.json").exists());
    assert!(!alt.join("runs/fbovi").exists());
    let echo = read_json(&alt.join("runs/jukf/realization-000/config.json"));
    assert_eq!(echo["seed"], json!(7));
    assert_eq!(echo["method"]["method"], json!("jukf"));
}

fn expect_code(args: &[&str], code: i32, needle: &str) {
    let out = assim(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    assert!(stderr.contains(needle), "expected {needle:?} in {stderr}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let lorenz = write_config(tmp.path(), json!({"experiment": "lorenz-correct", "output_dir": out}));
    let p = lorenz.to_str().unwrap();
    expect_code(&["bound", "--config", p], 2, "linear");
    expect_code(&["oracle", "--config", p], 2, "linear");
    expect_code(&["run", "--config", p], 2, "assim generate");
    expect_code(&["run", "--config", p, "--method", "kalman"], 2, "unknown method");

    let bad = write_config(tmp.path(), json!({"experiment": "pendulum"}));
    expect_code(&["generate", "--config", bad.to_str().unwrap()], 2, "unknown variant `pendulum`");
    let dup = write_config(
        tmp.path(),
        json!({"experiment": "scalar-toy", "realizations": 2, "seeds": [3, 3]}),
    );
    expect_code(&["generate", "--config", dup.to_str().unwrap()], 2, "unique");
    let typo = write_config(tmp.path(), json!({"experiment": "scalar-toy", "realisations": 2}));
    expect_code(&["generate", "--config", typo.to_str().unwrap()], 2, "unknown field");
    expect_code(&["generate", "--config", tmp.path().join("nope.json").to_str().unwrap()], 2, "cannot read");
}

#[test]
fn bound_without_elbo_is_a_clear_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut value = toy_config(&out);
    value["realizations"] = json!(1);
    let config = write_config(tmp.path(), value);
    run_ok("generate", &config, &[]);
    run_ok("run", &config, &["--method", "fbovi"]);
    let steps_path = out.join("runs/fbovi/realization-000/steps.jsonl");
    let stripped: Vec<String> = fs::read_to_string(&steps_path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["diagnostics"] = Value::Null;
            v.to_string()
        })
        .collect();
    fs::write(&steps_path, stripped.join("\n") + "\n").unwrap();
    expect_code(&["bound", "--config", config.to_str().unwrap()], 2, "terminal ELBO");
}

#[test]
fn particle_filter_degeneracy_is_logged_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(
        tmp.path(),
        json!({
            "experiment": "pendulum-dynobs",
            "output_dir": out,
            "summary": {"samples": 200},
            "methods": [{"method": "jpf", "particles": 10000}]
        }),
    );
    run_ok("generate", &config, &[]);
    run_ok("run", &config, &[]);
    let dir = out.join("runs/jpf/realization-000");
    let summary = read_json(&dir.join("summary.json"));
    assert_eq!(summary["method"], json!("jpf"));
    let degenerate = fs::read_to_string(dir.join("steps.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| serde_json::from_str::<Value>(l).unwrap()["diagnostics"]["degenerate"] == json!(true))
        .count();
    assert!(degenerate > 0, "expected degenerate steps at 10^4 particles");
}

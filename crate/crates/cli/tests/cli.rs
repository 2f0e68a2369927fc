use std::path::Path;
use std::process::{Command, Output};

use chainsbi::harness::{csv_body, ExperimentConfig};
use chainsbi::ObservableKind;

fn chainsbi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chainsbi")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config.to_toml().unwrap()).unwrap();
    path.display().to_string()
}

fn quick_tau(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::tau_2d();
    c.schedule = vec![50, 50];
    c.n_ensemble = 2;
    c.n_target_trials = 10;
    c.n_posterior_samples = 200;
    c.train.max_epochs = 40;
    c.validation.ppc_samples = 50;
    c.validation.coverage_pairs = 20;
    c.validation.coverage_samples = 50;
    c.validation.amortized_targets = 2;
    c.validation.amortized_samples = 50;
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn grid_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = chainsbi(&["grid", "--seed", "3", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["nodes"], 1600);
    }
    let text = std::fs::read_to_string(a.join("grid.csv")).unwrap();
    assert!(text.starts_with("# config_hash="));
    let body = csv_body(&text);
    assert_eq!(body.lines().next().unwrap(), "g_leak,g_axial,tau");
    assert_eq!(body.lines().count(), 1601);
    assert_eq!(std::fs::read(a.join("grid.csv")).unwrap(), std::fs::read(b.join("grid.csv")).unwrap());
    assert!(a.join("config.json").exists());
}

#[test]
fn malformed_config_reports_location() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\nlayout = \"global_2d\"\nschedule = [50, \"many\"]\n").unwrap();
    let out = chainsbi(&["grid", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "parse");
    let message = err["message"].as_str().unwrap();
    assert!(message.contains("line 3"), "{message}");
    assert!(message.contains("schedule"), "{message}");

    std::fs::write(&path, "colour = 3\n").unwrap();
    let err = stderr_json(&chainsbi(&["grid", "--config", path.to_str().unwrap()]));
    assert!(err["message"].as_str().unwrap().contains("colour"));

    let mut c = ExperimentConfig::tau_2d();
    c.observable = ObservableKind::FullMatrix;
    std::fs::write(&path, c.to_toml().unwrap()).unwrap();
    let err = stderr_json(&chainsbi(&["grid", "--config", path.to_str().unwrap()]));
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("dim_x"));

    let out = chainsbi(&["grid", "--preset", "nonexistent"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn infer_then_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("nested").join("run");
    let config = write_config(tmp.path(), &quick_tau(&run));
    let out = chainsbi(&["infer", "--config", &config, "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["summary"]["simulator_calls"], 2 * 100 + 10);
    for f in ["config.json", "target.json", "samples.csv", "correlation.csv", "summary.json", "member_1/round_1/flow.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let samples = csv_body(&std::fs::read_to_string(run.join("samples.csv")).unwrap());
    assert_eq!(samples.lines().count(), 201);
    let summary = std::fs::read_to_string(run.join("summary.json")).unwrap();
    assert!(summary.contains("\"master_seed\": 11"));

    let run_arg = run.to_str().unwrap();
    for (which, file) in [("ppc", "ppc.json"), ("coverage", "coverage.csv"), ("amortized", "amortized.json")] {
        let out = chainsbi(&["validate", run_arg, "--which", which]);
        assert!(out.status.success(), "{which}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(run.join(file).exists(), "{file}");
    }
    let coverage = csv_body(&std::fs::read_to_string(run.join("coverage.csv")).unwrap());
    assert_eq!(coverage.lines().next().unwrap(), "level,member_0,member_1,ensemble");
    assert_eq!(coverage.lines().count(), 100);

    let err = stderr_json(&chainsbi(&["validate", tmp.path().to_str().unwrap(), "--which", "ppc"]));
    assert_eq!(err["error"], "io");
}

#[test]
fn unwritable_output_fails_before_simulating() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = chainsbi(&["infer", "--out", blocker.join("run").to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "io");
    assert!(out.stdout.is_empty());
}

#[test]
fn seven_parameter_run_writes_correlation_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::per_element_7d(ObservableKind::FullMatrix);
    c.schedule = vec![200];
    c.n_ensemble = 1;
    c.n_target_trials = 5;
    c.n_posterior_samples = 300;
    c.train.max_epochs = 20;
    c.flow = c.flow.with_architecture(1, 2, 16);
    c.output_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), &c);
    let out = chainsbi(&["infer", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corr = csv_body(&std::fs::read_to_string(c.output_dir.join("correlation.csv")).unwrap());
    let rows: Vec<&str> = corr.lines().collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
}

#[test]
fn simulate_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = chainsbi(&["simulate", "--out", tmp.path().to_str().unwrap(), "--theta", "511,511"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traces = csv_body(&std::fs::read_to_string(tmp.path().join("traces.csv")).unwrap());
    assert!(traces.lines().count() > 1000);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["observable"].as_array().unwrap().len(), 1);

    let bad = chainsbi(&["simulate", "--out", tmp.path().to_str().unwrap(), "--theta", "511"]);
    assert!(!bad.status.success());
    assert_eq!(stderr_json(&bad)["error"], "shape");

    let out = chainsbi(&["config", "--preset", "first_column_2d", "--seed", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = ExperimentConfig::from_toml(&text, Path::new("stdout")).unwrap();
    assert_eq!(parsed.master_seed, 4);
    assert_eq!(parsed.schedule.len(), 11);
}

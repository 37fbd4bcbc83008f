use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5
[grid]
steps = 20
[solver]
particles = 500
[counterexample]
calibration_samples = 100000
samples = 100000
times = 3
tail_x = [2.0, 5.0]
tail_samples = 100000
[limits]
paths = 2000
steps = 40
[kernel]
paths = 5000
lags = 6
particles = 5000
flow_particles = 500
[metrics]
instances = 5
dual_functions = 50
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mvstable"));
    c.env_remove("MVSTABLE_OUT");
    c
}

fn config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn list_names_every_experiment() {
    let o = run(&["list"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["simulate", "contraction", "counterexample", "limits", "kernel-check", "metrics-selftest"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
}

#[test]
fn simulate_writes_artifacts_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["--out", s(&a), "simulate", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["--out", s(&b), "--threads", "1", "simulate", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));

    for f in ["flow.csv", "laplace.csv", "iterations.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let flow = fs::read_to_string(a.join("flow.csv")).unwrap();
    assert_eq!(flow.lines().next().unwrap(), "t,x_1,weight");
    let laplace = fs::read_to_string(a.join("laplace.csv")).unwrap();
    assert_eq!(laplace.lines().next().unwrap(), "alpha,t,r,estimate,stderr,exact");
    assert_eq!(laplace.lines().count(), 7);

    let m = json(&a.join("manifest.json"));
    assert_eq!(m["experiment"], "simulate");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["status"]["ok"], true);
    assert!(m["threads"].as_u64().unwrap() >= 1);
    assert_eq!(json(&b.join("manifest.json"))["threads"], 1);
    assert_eq!(m["config_sha256"], json(&b.join("manifest.json"))["config_sha256"]);
    let files: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|f| f["file"].as_str().unwrap()).collect();
    assert!(files.contains(&"flow.csv") && files.contains(&"iterations.json"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["--out", s(&a), "simulate", "--config", s(&cfg)]).status.success());
    assert!(run(&["--out", s(&b), "--seed", "6", "simulate", "--config", s(&cfg)]).status.success());
    assert_eq!(json(&b.join("manifest.json"))["seed"], 6);
    assert_ne!(fs::read(a.join("flow.csv")).unwrap(), fs::read(b.join("flow.csv")).unwrap());
}

#[test]
fn env_var_sets_output_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "small.toml", SMALL);
    let out = dir.path().join("from-env");
    let o = bin()
        .env("MVSTABLE_OUT", &out)
        .args(["metrics-selftest", "--config", s(&cfg)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics_selftest.json").exists());
}

#[test]
fn alpha_outside_window_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "bad.toml", "[model]\nalpha = 2.5\n");
    let o = run(&["--out", s(&dir.path().join("o")), "simulate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(A1)"), "{}", stderr(&o));

    let o = run(&["validate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(A1)"));
}

#[test]
fn coefficient_windows_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "bad.toml", "[model]\nalpha = 1.5\nk = 1.6\nbeta = 0.2\n");
    let o = run(&["validate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("(A2)") && err.contains("k∈[1,α)") && err.contains("2β+α>2"), "{err}");
}

#[test]
fn validate_accepts_defaults_and_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let ok = config(&dir, "ok.toml", "experiment = \"simulate\"\n[model]\ndim = 2\n");
    let o = run(&["validate", "--config", s(&ok)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "ok");

    let typo = config(&dir, "typo.toml", "[solver]\nparticels = 10\n");
    let o = run(&["validate", "--config", s(&typo)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("particels"));
}

#[test]
fn conflicting_experiment_name_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.toml", "experiment = \"limits\"\n");
    let o = run(&["--out", s(&dir.path().join("o")), "simulate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_convergence_exits_two_with_diagnostics() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        &dir,
        "nc.toml",
        "[grid]\nsteps = 20\n[solver]\nparticles = 500\nmax_outer = 1\ntol_outer = 1e-12\n",
    );
    let out = dir.path().join("o");
    let o = run(&["--out", s(&out), "simulate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let d = json(&out.join("diagnostics.json"));
    assert_eq!(d["kind"], "non_convergence");
    assert_eq!(d["stage"], "outer");
    assert_eq!(d["iterations"], 1);
    assert_eq!(json(&out.join("manifest.json"))["status"]["ok"], false);
}

#[test]
fn run_dispatches_on_config_experiment() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "run.toml", &format!("experiment = \"limits\"\n{SMALL}"));
    let out = dir.path().join("o");
    let o = run(&["--out", s(&out), "run", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("limit_i.csv").exists());
}

#[test]
fn small_runs_of_every_experiment_succeed() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "small.toml", SMALL);
    let cases: [(&[&str], &[&str]); 7] = [
        (&["contraction"], &["contraction.csv", "contraction.json"]),
        (&["counterexample"], &["counterexample.json", "tail_ratio.csv"]),
        (&["limits", "--part", "ii"], &["limit_ii.csv", "limit_ii.json"]),
        (&["kernel-check", "--check", "scaling"], &["kernel_scaling.csv", "kernel_scaling.json"]),
        (&["kernel-check", "--check", "perturbation"], &["kernel_perturbation.csv", "kernel_perturbation.json"]),
        (&["kernel-check", "--check", "duhamel"], &["kernel_duhamel.csv", "kernel_duhamel.json"]),
        (&["metrics-selftest"], &["metrics_selftest.json"]),
    ];
    for (i, (args, files)) in cases.iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let mut full = vec!["--out", s(&out)];
        full.extend_from_slice(args);
        full.extend_from_slice(&["--config", s(&cfg)]);
        let o = run(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        for f in *files {
            assert!(out.join(f).exists(), "{args:?} did not write {f}");
        }
        let m = json(&out.join("manifest.json"));
        assert_eq!(m["artifacts"].as_array().unwrap().len(), files.len());
    }

    let tail = fs::read_to_string(dir.path().join("o1/tail_ratio.csv")).unwrap();
    assert_eq!(tail.lines().next().unwrap(), "x,estimate,stderr,limit,tail_hits,band_hits");
    let contraction = fs::read_to_string(dir.path().join("o0/contraction.csv")).unwrap();
    assert_eq!(contraction.lines().next().unwrap(), "delta,input_distance,output_distance,ratio");
    assert_eq!(contraction.lines().count(), 4);
    let selftest = json(&dir.path().join("o6/metrics_selftest.json"));
    assert_eq!(selftest["pass"], true);
}

#[test]
fn default_simulate_writes_only_into_default_directory() {
    let dir = TempDir::new().unwrap();
    let o = bin().current_dir(dir.path()).arg("simulate").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let top: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, ["runs"]);
    let out = dir.path().join("runs/simulate");
    let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["flow.csv", "iterations.json", "laplace.csv", "manifest.json"]);
    let iterations = json(&out.join("iterations.json"));
    assert!(iterations["outer"]["iterations"].as_u64().unwrap() >= 1);
}

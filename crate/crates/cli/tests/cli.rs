use std::path::Path;
use std::process::Command;

use lbfmpc::harness::{read_compare_csv, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lbfmpc"))
}

fn small_config(dir: &Path, constrained: bool) -> std::path::PathBuf {
    let mut cfg = if constrained { RunConfig::constrained() } else { RunConfig::default() };
    cfg.gp.sampling.n = 100;
    cfg.gp.holdout = 50;
    cfg.episode_periods = 0.1;
    cfg.trials = 2;
    let path = dir.join(if constrained { "c.json" } else { "u.json" });
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

#[test]
fn verbs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), false);
    let cfg = cfg.to_str().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    let (code, text) = run(&["train", "--config", cfg, "--out", &d("train")]);
    assert_eq!(code, 0, "{text}");
    let gp = d("train/gp.json");
    assert!(Path::new(&gp).exists());

    let (code, text) = run(&["validate-gp", "--config", cfg, "--gp", &gp, "--out", &d("val")]);
    assert_eq!(code, 0, "{text}");
    assert!(dir.path().join("val/validation.json").exists());

    for mode in ["learned", "exact-psi"] {
        let out = d(&format!("run_{mode}"));
        let (code, text) = run(&["run", "--config", cfg, "--gp", &gp, "--mode", mode, "--seed", "4", "--out", &out]);
        assert_eq!(code, 0, "{text}");
        for f in ["steps.csv", "metrics.json", "timeseries.csv", "trajectory.svg", "tracking_error.svg", "thrust.svg"] {
            assert!(Path::new(&out).join(f).exists(), "{mode} {f}");
        }
    }

    let (code, text) = run(&["compare", "--config", cfg, "--gp", &gp, "--out", &d("cmp")]);
    assert_eq!(code, 0, "{text}");
    let rows = read_compare_csv(&dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.mode.as_str()).collect::<Vec<_>>(), ["learned", "exact-psi"]);

    let (code, text) = run(&["dump-socp", "--config", cfg, "--gp", &gp, "--step", "3", "--out", &d("dump")]);
    assert_eq!(code, 0, "{text}");
    let json = std::fs::read_to_string(dir.path().join("dump/socp_step3.json")).unwrap();
    assert!(lbfmpc::conic::ConeProgram::<f64>::from_json(&json).is_ok());
}

#[test]
fn run_trains_when_no_artifact_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), true);
    let out = dir.path().join("out");
    let (code, text) = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    assert!(out.join("gp/gp.json").exists());
    assert!(out.join("steps.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"horizon": -1}"#).unwrap();
    assert_eq!(run(&["run", "--config", bad.to_str().unwrap()]).0, 4);
    assert_eq!(run(&["run", "--config", "/nonexistent/config.json"]).0, 4);
    let cfg = small_config(dir.path(), false);
    assert_eq!(run(&["validate-gp", "--config", cfg.to_str().unwrap()]).0, 4);
    assert_eq!(run(&["dump-socp", "--config", cfg.to_str().unwrap(), "--step", "100000"]).0, 4);

    // contradictory half-spaces leave the MPC infeasible, so every step holds
    let mut c = RunConfig::default();
    c.gp.sampling.n = 80;
    c.episode_periods = 0.1;
    let x = |s: f64| vec![s, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    c.constraints.half_spaces =
        vec![lbfmpc::fmpc::HalfSpace { h: x(1.0), b: 0.0 }, lbfmpc::fmpc::HalfSpace { h: x(-1.0), b: -1.0 }];
    let path = dir.path().join("abort.json");
    std::fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    let out = dir.path().join("abort");
    let (code, text) = run(&["run", "--config", path.to_str().unwrap(), "--mode", "learned", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{text}");
    assert!(out.join("steps.csv").exists());
}

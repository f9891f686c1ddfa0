use std::sync::OnceLock;

use lbfmpc::harness::{
    self, generate_data, load_gp, read_compare_csv, run_episode, run_episode_observed, step_header, train_gp,
    train_pipeline, write_compare_csv, write_steps_csv, CompareRow, Mode, RunConfig, StepLog, StepSource,
};
use lbfmpc::conic::{ConeProgram, InteriorPoint};
use lbfmpc::{AffineGpF64, Error, FilterResultF64};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gp.sampling.n = 120;
    cfg.gp.holdout = 60;
    cfg.episode_periods = 0.25;
    cfg.trials = 2;
    cfg
}

fn small_gp() -> &'static AffineGpF64 {
    static GP: OnceLock<AffineGpF64> = OnceLock::new();
    GP.get_or_init(|| {
        let cfg = small_config();
        let (train, _) = generate_data(&cfg).unwrap();
        train_gp(&cfg, &train).unwrap().0
    })
}

/// Everything but the wall-clock fields.
fn untimed(s: &StepLog) -> StepLog {
    StepLog { fmpc_us: 0.0, filter_us: 0.0, ..s.clone() }
}

#[test]
fn episodes_are_deterministic() {
    let cfg = small_config();
    for mode in [Mode::Learned, Mode::ExactPsi] {
        let a = run_episode(&cfg, mode, Some(small_gp()), 7).unwrap();
        let b = run_episode(&cfg, mode, Some(small_gp()), 7).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            let (x, y) = (untimed(x), untimed(y));
            assert_eq!(format!("{x:?}"), format!("{y:?}"));
        }
        let c = run_episode(&cfg, mode, Some(small_gp()), 8).unwrap();
        assert_ne!(a.steps[0].z_hat, c.steps[0].z_hat);
    }
}

#[test]
fn applied_input_is_the_extension_output() {
    let cfg = small_config();
    let ext = cfg.extension_spec().unwrap();
    let ep = run_episode(&cfg, Mode::Learned, Some(small_gp()), 3).unwrap();
    let mut checked = 0;
    for s in ep.steps.iter().filter(|s| s.filter_status.is_some_and(|st| st.is_optimal())) {
        let eta = nalgebra::DVector::from_vec(s.eta_prev.clone());
        let nu = nalgebra::DVector::from_vec(s.nu.clone());
        let (_, u) = ext.step(&eta, &nu).unwrap();
        assert_eq!(u.as_slice(), s.u.as_slice());
        checked += 1;
    }
    assert!(checked > ep.steps.len() / 2);
}

#[test]
fn exact_inversion_from_the_reference_tracks_it() {
    let mut cfg = small_config();
    cfg.init_radius = 0.0;
    let ep = run_episode(&cfg, Mode::ExactPsi, None, 0).unwrap();
    assert!(!ep.metrics.aborted);
    for s in &ep.steps[1..] {
        let err = ((s.z_hat[0] - s.z_ref[0]).powi(2) + (s.z_hat[4] - s.z_ref[4]).powi(2)).sqrt();
        assert!(err < 1e-3, "step {}: {err}", s.k);
        assert_eq!(s.source, StepSource::Exact);
    }
}

#[test]
fn learned_mode_needs_a_gp() {
    let cfg = small_config();
    let err = run_episode(&cfg, Mode::Learned, None, 0).unwrap_err();
    assert_eq!(harness::exit_code(&err), 4);
}

#[test]
fn initial_ball_respects_radius() {
    let cfg = small_config();
    let reference = cfg.sampling_reference().unwrap();
    for seed in 0..50 {
        let ep_state = harness::initial_state(&cfg, seed).unwrap().0;
        let z = lbfmpc::quadrotor::physical_to_flat(&ep_state, 0.0, 0.0, &cfg.plant);
        let r = &reference.z_ref[0];
        assert!(((z[0] - r[0]).powi(2) + (z[4] - r[4]).powi(2)).sqrt() <= 0.05 + 1e-12);
        assert!(((z[1] - r[1]).powi(2) + (z[5] - r[5]).powi(2)).sqrt() <= 0.05 + 1e-12);
    }
}

#[test]
fn step_csv_matches_header() {
    let cfg = small_config();
    let ep = run_episode(&cfg, Mode::Learned, Some(small_gp()), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steps.csv");
    write_steps_csv(&ep.steps, &path).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, step_header(8, 2, 3, 0));
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), ep.steps.len());
    for (row, s) in rows.iter().zip(&ep.steps) {
        assert_eq!(row.len(), header.len());
        assert_eq!(row[2].parse::<f64>().unwrap(), s.z_hat[0]);
        assert_eq!(StepSource::parse(&row[header.iter().position(|h| h == "source").unwrap()]), Some(s.source));
    }
}

#[test]
fn compare_csv_round_trips() {
    let cfg = small_config();
    let runs = harness::compare(&cfg, &[Mode::Learned, Mode::ExactPsi], Some(small_gp())).unwrap();
    let rows: Vec<CompareRow> = runs.iter().map(|(m, e)| CompareRow::from_episodes(*m, e)).collect();
    assert_eq!(rows[0].mode, "learned");
    assert_eq!(rows[1].mode, "exact-psi");
    assert_eq!(rows[1].lyapunov_decrease_min, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("compare.csv");
    write_compare_csv(&rows, &path).unwrap();
    assert_eq!(read_compare_csv(&path).unwrap(), rows);
}

#[test]
fn dumped_filter_program_round_trips() {
    let cfg = small_config();
    let mut seen: Vec<(usize, FilterResultF64)> = Vec::new();
    let mut grab = |k: usize, r: &FilterResultF64| {
        if k % 20 == 0 {
            seen.push((k, r.clone()));
        }
    };
    run_episode_observed(&cfg, Mode::Learned, Some(small_gp()), 2, Some(&mut grab)).unwrap();
    assert!(!seen.is_empty());
    for (_, res) in &seen {
        let back = ConeProgram::<f64>::from_json(&res.program.to_json().unwrap()).unwrap();
        assert_eq!(back.to_dump(), res.program.to_dump());
        let sol = InteriorPoint::new().solve(&back).unwrap();
        assert_eq!(sol.report.status, res.status);
        if let Some(nu) = &res.nu_star {
            assert_eq!(sol.y.rows(0, 2).into_owned(), *nu);
        }
    }
}

#[test]
fn train_pipeline_writes_a_loadable_artifact() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = train_pipeline(&cfg, dir.path()).unwrap();
    for f in ["gp.json", "calibration.json", "train.csv", "holdout.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let gp = load_gp(&cfg, &out.artifact).unwrap();
    let z = cfg.sampling_reference().unwrap().z_ref[3].clone();
    let nu = nalgebra::DVector::from_vec(vec![0.3, -0.1]);
    assert_eq!(gp.predict(&z, &nu).unwrap(), out.gp.predict(&z, &nu).unwrap());
    assert_eq!(out.report.outputs.len(), 2);
    assert_eq!(out.report.n_train, 120);
}

#[test]
fn failing_rmse_gate_is_reported() {
    let mut cfg = small_config();
    cfg.gp.rmse_gate = 1e-12;
    let dir = tempfile::tempdir().unwrap();
    let err = train_pipeline(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Calibration(_)));
    assert_eq!(harness::exit_code(&err), 1);
    assert!(dir.path().join("calibration.json").exists());
}

#[test]
fn bad_configs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"bogus": 1}"#.to_string(),
        r#"{"horizon": 0}"#.to_string(),
        r#"{"q_diag": [1.0, 2.0]}"#.to_string(),
        r#"{"constraints": {"u_min": [0.5, -0.4], "u_max": [0.1, 0.4]}}"#.to_string(),
        "not json".to_string(),
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.json"));
        std::fs::write(&path, text).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(harness::exit_code(&err), 4, "{text}: {err}");
    }
    assert_eq!(harness::exit_code(&RunConfig::load(&dir.path().join("missing.json")).unwrap_err()), 4);
    let path = dir.path().join("ok.json");
    std::fs::write(&path, r#"{"horizon": 20, "trials": 3}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.horizon, cfg.trials, cfg.q_diag.len()), (20, 3, 8));
}

#[test]
fn shipped_configs_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(RunConfig::load(&root.join("unconstrained.json")).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::load(&root.join("constrained.json")).unwrap(), RunConfig::constrained());
}

#[test]
fn exit_codes() {
    assert_eq!(harness::exit_code(&Error::Aborted { step: 3, consecutive: 6 }), 2);
    assert_eq!(harness::exit_code(&Error::SolverFailure { step: 0, message: String::new() }), 3);
    assert_eq!(harness::exit_code(&Error::Config(String::new())), 4);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(6))]

    #[test]
    fn invariants_hold_for_any_seed(seed in proptest::prelude::any::<u64>(), learned in proptest::prelude::any::<bool>()) {
        let mut cfg = small_config();
        cfg.episode_periods = 0.1;
        let mode = if learned { Mode::Learned } else { Mode::ExactPsi };
        let ext = cfg.extension_spec().unwrap();
        let a = run_episode(&cfg, mode, Some(small_gp()), seed).unwrap();
        let b = run_episode(&cfg, mode, Some(small_gp()), seed).unwrap();
        proptest::prop_assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            proptest::prop_assert_eq!(format!("{:?}", untimed(x)), format!("{:?}", untimed(y)));
            let eta = nalgebra::DVector::from_vec(x.eta_prev.clone());
            let nu = nalgebra::DVector::from_vec(x.nu.clone());
            let (_, u) = ext.step(&eta, &nu).unwrap();
            proptest::prop_assert_eq!(u.as_slice(), x.u.as_slice());
        }
    }
}

use lbfmpc::conic::{solve_qp, SolveStatus};
use lbfmpc::flat::{assemble_flat_lti, riccati_synthesis, DiscreteFlatLti, FlatSpec};
use lbfmpc::fmpc::{max_constraint_violation, FlatMpc, HalfSpace, MpcSetup};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lti(rho: Vec<usize>, dt: f64) -> DiscreteFlatLti<f64> {
    assemble_flat_lti(&FlatSpec::new(rho, dt).unwrap()).unwrap()
}

fn block_q(rng: &mut ChaCha8Rng, spec: &FlatSpec<f64>) -> DMatrix<f64> {
    let n = spec.n_z();
    let mut q = DMatrix::zeros(n, n);
    for (&off, &r) in spec.offsets().iter().zip(&spec.rho) {
        let m = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        let blk = &m * m.transpose() + DMatrix::identity(r, r) * rng.random_range(0.1..2.0);
        q.view_mut((off, off), (r, r)).copy_from(&blk);
    }
    q
}

fn diag_r(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.01..1.0)))
}

/// Reference obtained by rolling the system out under random inputs.
fn consistent_reference(
    rng: &mut ChaCha8Rng,
    sys: &DiscreteFlatLti<f64>,
    horizon: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = sys.n_z();
    let mut z = vec![DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))];
    let mut v = Vec::new();
    for k in 0..horizon {
        let vk = DVector::from_fn(sys.m(), |_, _| rng.random_range(-1.0..1.0));
        z.push(sys.step(&z[k], &vk));
        v.push(vk);
    }
    (z, v)
}

/// Plain backward recursion with terminal weight `Q`, returning the first gain.
fn riccati_gain(sys: &DiscreteFlatLti<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let (a, b) = (&sys.a, &sys.b);
    let mut p = q.clone();
    let mut k = DMatrix::zeros(sys.m(), sys.n_z());
    for _ in 0..horizon {
        let s = r + b.transpose() * &p * b;
        k = s.try_inverse().unwrap() * b.transpose() * &p * a;
        let acl = a - b * &k;
        p = q + k.transpose() * r * &k + acl.transpose() * &p * &acl;
    }
    k
}

fn setup(sys: DiscreteFlatLti<f64>, q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> MpcSetup<f64> {
    MpcSetup { lti: sys, q, r, horizon, constraints: vec![], slack_penalty: None }
}

#[test]
fn single_step_scalar_by_hand() {
    // z+ = z + dt v, cost q (z+ - zr)^2 + r (v - vr)^2
    let (dt, q, r) = (0.5, 3.0, 0.2);
    let sys = lti(vec![1], dt);
    let mut mpc = FlatMpc::new(setup(sys, DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r), 1)).unwrap();
    let (z0, zr, vr) = (0.4, -0.3, 0.7);
    let sol = mpc
        .solve(&DVector::from_element(1, z0), &[DVector::from_element(1, 0.0), DVector::from_element(1, zr)], &[DVector::from_element(1, vr)])
        .unwrap();
    let v = (q * dt * (zr - z0) + r * vr) / (q * dt * dt + r);
    assert!((sol.v_star[0] - v).abs() < 1e-12);
    assert!((sol.z_next[0] - (z0 + dt * v)).abs() < 1e-12);
    assert_eq!(sol.z_star[0], z0);
    assert_eq!(sol.status, SolveStatus::Optimal);
}

#[test]
fn zero_reference_from_origin_gives_zero_input() {
    let sys = lti(vec![4, 4], 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = block_q(&mut rng, &sys.spec);
    let mut mpc = FlatMpc::new(setup(sys, q, diag_r(&mut rng, 2), 10)).unwrap();
    let z = vec![DVector::zeros(8); 11];
    let v = vec![DVector::zeros(2); 10];
    let sol = mpc.solve(&DVector::zeros(8), &z, &v).unwrap();
    assert!(sol.inputs.iter().all(|u| u.amax() < 1e-14));
    assert!(sol.objective.abs() < 1e-20);
}

#[test]
fn condensed_hessian_is_positive_definite() {
    let sys = lti(vec![4, 4], 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = block_q(&mut rng, &sys.spec);
    let mpc = FlatMpc::new(setup(sys, q, diag_r(&mut rng, 2), 50)).unwrap();
    let h = mpc.hessian();
    assert_eq!(h.shape(), (100, 100));
    assert!((h - h.transpose()).amax() == 0.0);
    assert!(h.clone().cholesky().is_some());
}

#[test]
fn unconstrained_first_input_matches_riccati_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let rho = match trial % 3 {
            0 => vec![4, 4],
            1 => vec![2, 3],
            _ => vec![1, 2, 3],
        };
        let dt = rng.random_range(0.01..0.2);
        let horizon = rng.random_range(1..25);
        let sys = lti(rho, dt);
        let q = block_q(&mut rng, &sys.spec);
        let r = diag_r(&mut rng, sys.m());
        let k = riccati_gain(&sys, &q, &r, horizon);
        if let Ok(ric) = riccati_synthesis(&sys, &q, &r, horizon) {
            assert!((&ric.k - &k).amax() < 1e-9 * (1.0 + k.amax()));
        }
        let (z_ref, v_ref) = consistent_reference(&mut rng, &sys, horizon);
        let z0 = &z_ref[0] + DVector::from_fn(sys.n_z(), |_, _| rng.random_range(-0.5..0.5));
        let expect = &v_ref[0] - &k * (&z0 - &z_ref[0]);
        let mut mpc = FlatMpc::new(setup(sys, q, r, horizon)).unwrap();
        let sol = mpc.solve(&z0, &z_ref, &v_ref).unwrap();
        let err = (&sol.v_star - &expect).amax() / (1.0 + expect.amax());
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst relative deviation {worst:e}");
}

#[test]
fn on_reference_tracks_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sys = lti(vec![4, 4], 0.02);
    let q = block_q(&mut rng, &sys.spec);
    let r = diag_r(&mut rng, 2);
    let (z_ref, v_ref) = consistent_reference(&mut rng, &sys, 20);
    let mut mpc = FlatMpc::new(setup(sys, q, r, 20)).unwrap();
    let sol = mpc.solve(&z_ref[0], &z_ref, &v_ref).unwrap();
    assert!((&sol.z_next - &z_ref[1]).amax() < 1e-9);
    assert!((&sol.v_star - &v_ref[0]).amax() < 1e-9);
    assert!(sol.objective < 1e-16);
}

#[test]
fn active_half_space_satisfies_kkt() {
    let sys = lti(vec![4, 4], 0.05);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 1.0, 0.1, 0.01, 100.0, 1.0, 0.1, 0.01]));
    let r = DMatrix::identity(2, 2) * 1e-3;
    // x <= 0.2 while the reference sits at x = 1
    let mut s = setup(sys, q, r, 15);
    s.constraints = vec![HalfSpace { h: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], b: 0.2 }];
    let mut mpc = FlatMpc::new(s.clone()).unwrap();
    let z_ref = vec![DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]); 16];
    let v_ref = vec![DVector::zeros(2); 15];
    let z0 = DVector::zeros(8);
    let sol = mpc.solve(&z0, &z_ref, &v_ref).unwrap();
    assert!(sol.status.is_optimal());
    let viol = max_constraint_violation(&s.constraints, &sol.states);
    assert!(viol <= 1e-9, "violation {viol:e}");
    assert!(viol > -1e-9, "constraint should be active");

    let qp = mpc.build_qp(&z0, &z_ref, &v_ref).unwrap();
    let x = DVector::from_iterator(30, sol.inputs.iter().flat_map(|u| u.iter().copied()));
    let resid = &qp.c * &x - &qp.d;
    let other = solve_qp(&qp).unwrap();
    let stationarity = &qp.h * &x + &qp.g + qp.c.transpose() * &other.multipliers;
    assert!(stationarity.amax() < 1e-8 * (1.0 + qp.g.amax()));
    assert!(resid.max() <= 1e-9);
    assert!(other.multipliers.iter().all(|&l| l >= 0.0));
    for (l, r) in other.multipliers.iter().zip(resid.iter()) {
        assert!((l * r).abs() < 1e-8, "{l:e} {r:e}");
    }
    assert!((&other.x - &x).amax() < 1e-10);
}

#[test]
fn warm_start_reproduces_cold_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sys = lti(vec![4, 4], 0.05);
    let q = block_q(&mut rng, &sys.spec);
    let r = diag_r(&mut rng, 2);
    let mut s = setup(sys.clone(), q, r, 15);
    s.constraints = vec![
        HalfSpace { h: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], b: 0.3 },
        HalfSpace { h: vec![0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0], b: -0.2 },
    ];
    let mut warm = FlatMpc::new(s.clone()).unwrap();
    let z_ref = vec![DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]); 16];
    let v_ref = vec![DVector::zeros(2); 15];
    let mut z = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
    for _ in 0..20 {
        let a = warm.solve(&z, &z_ref, &v_ref).unwrap();
        let mut cold = FlatMpc::new(s.clone()).unwrap();
        let b = cold.solve(&z, &z_ref, &v_ref).unwrap();
        assert!((&a.v_star - &b.v_star).amax() < 1e-9);
        z = sys.step(&z, &a.v_star);
    }
}

#[test]
fn infeasible_constraints_reported() {
    let sys = lti(vec![2], 0.1);
    let mut s = setup(sys, DMatrix::identity(2, 2), DMatrix::identity(1, 1), 3);
    // x <= -1 and -x <= -1
    s.constraints = vec![HalfSpace { h: vec![1.0, 0.0], b: -1.0 }, HalfSpace { h: vec![-1.0, 0.0], b: -1.0 }];
    let mut mpc = FlatMpc::new(s.clone()).unwrap();
    let z = vec![DVector::zeros(2); 4];
    let v = vec![DVector::zeros(1); 3];
    let out = mpc.solve(&DVector::zeros(2), &z, &v);
    match out {
        Ok(sol) => assert_eq!(sol.status, SolveStatus::Infeasible),
        Err(e) => panic!("expected an infeasible status, got {e}"),
    }
    s.slack_penalty = Some(100.0);
    let mut soft = FlatMpc::new(s).unwrap();
    let sol = soft.solve(&DVector::zeros(2), &z, &v).unwrap();
    assert!(sol.status.is_optimal());
    assert!(sol.slack > 0.5);
}

#[test]
fn invalid_setups_rejected() {
    let sys = lti(vec![2, 2], 0.1);
    let mut q = DMatrix::identity(4, 4);
    q[(0, 2)] = 0.1;
    q[(2, 0)] = 0.1;
    assert!(FlatMpc::new(setup(sys.clone(), q, DMatrix::identity(2, 2), 5)).is_err());
    assert!(FlatMpc::new(setup(sys.clone(), DMatrix::identity(4, 4), DMatrix::identity(2, 2), 0)).is_err());
    let mut r = DMatrix::identity(2, 2);
    r[(0, 1)] = 0.5;
    r[(1, 0)] = 0.5;
    assert!(FlatMpc::new(setup(sys.clone(), DMatrix::identity(4, 4), r, 5)).is_err());
    let mpc = FlatMpc::new(setup(sys, DMatrix::identity(4, 4), DMatrix::identity(2, 2), 5)).unwrap();
    assert!(mpc.build_qp(&DVector::zeros(4), &vec![DVector::zeros(4); 5], &vec![DVector::zeros(2); 5]).is_err());
}

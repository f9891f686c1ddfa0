use lbfmpc::conic::{solve_cone, solve_qp, ConeProgram, QpProblem, SocConstraint, SolveStatus, VarBound};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem<f64> {
    let l = random_matrix(rng, n, n);
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    let g = random_vector(rng, n) * 3.0;
    let c = random_matrix(rng, m, n);
    let x0 = random_vector(rng, n) * 0.3;
    let d = &c * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.05..0.5));
    QpProblem { h, g, c, d }
}

/// Accelerated projected gradient ascent on the QP dual.
fn dual_gradient_oracle(p: &QpProblem<f64>) -> (DVector<f64>, f64) {
    let hinv = p.h.clone().cholesky().unwrap().inverse();
    let m = p.d.len();
    let cm = &p.c * &hinv * p.c.transpose();
    let lip = cm.symmetric_eigenvalues().amax();
    let primal = |lam: &DVector<f64>| -(&hinv * (&p.g + p.c.transpose() * lam));
    let mut lam = DVector::zeros(m);
    let mut prev = lam.clone();
    let mut y = lam.clone();
    let mut t: f64 = 1.0;
    for _ in 0..200_000 {
        let x = primal(&y);
        let grad = &p.c * &x - &p.d;
        lam = (&y + grad / lip).map(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &lam + (&lam - &prev) * ((t - 1.0) / t_next);
        prev = lam.clone();
        t = t_next;
    }
    let x = primal(&lam);
    let obj = p.objective(&x);
    (x, obj)
}

#[test]
fn qp_matches_first_order_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = random_qp(&mut rng, 6, 12);
        let sol = solve_qp(&p).unwrap();
        assert!(sol.report.status.is_optimal());
        let (x_ref, obj_ref) = dual_gradient_oracle(&p);
        assert!((sol.objective - obj_ref).abs() <= 1e-6, "{} vs {}", sol.objective, obj_ref);
        assert!((&sol.x - x_ref).amax() <= 1e-5);
        assert!(sol.report.primal_residual <= 1e-8);
        assert!(sol.report.gap <= 1e-8);
        assert!(sol.report.wall_time_us > 0.0);
    }
}

#[test]
fn qp_warm_start_reproduces_cold_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_qp(&mut rng, 5, 10);
    let mut solver = lbfmpc::conic::DualActiveSet::new();
    let cold = solver.solve(&p).unwrap();
    solver.warm_start = cold.active.clone();
    let warm = solver.solve(&p).unwrap();
    assert!((&cold.x - &warm.x).amax() < 1e-10);
    assert!(warm.report.iterations <= cold.report.iterations);
}

fn ball_program(center: &DVector<f64>, radius: f64, objective: &DVector<f64>) -> ConeProgram<f64> {
    let n = center.len();
    ConeProgram {
        objective: objective.clone(),
        socs: vec![SocConstraint { a: DMatrix::identity(n, n), b: center.clone(), c: DVector::zeros(n), d: radius }],
        lin_g: DMatrix::zeros(0, n),
        lin_h: DVector::zeros(0),
        bounds: vec![],
    }
}

#[test]
fn ball_minimizer_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(1..6);
        let center = random_vector(&mut rng, n);
        let c = random_vector(&mut rng, n);
        let r = rng.random_range(0.1..2.0);
        let sol = solve_cone(&ball_program(&center, r, &c)).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Optimal);
        let expect = &center - &c * (r / c.norm());
        assert!((&sol.y - expect).amax() < 1e-7);
    }
}

fn random_socp(rng: &mut ChaCha8Rng) -> ConeProgram<f64> {
    let n = rng.random_range(2..8);
    let y0 = random_vector(rng, n) * 0.5;
    let mut socs = Vec::new();
    for _ in 0..rng.random_range(1..5) {
        let k = rng.random_range(1..5);
        let a = random_matrix(rng, k, n);
        let b = random_vector(rng, k);
        let c = random_vector(rng, n) * 0.3;
        let d = (&a * &y0 - &b).norm() - c.dot(&y0) + rng.random_range(0.1..1.0);
        socs.push(SocConstraint { a, b, c, d });
    }
    let rows = rng.random_range(0..4);
    let lin_g = random_matrix(rng, rows, n);
    let lin_h = &lin_g * &y0 + DVector::from_fn(rows, |_, _| rng.random_range(0.1..1.0));
    let bounds = (0..n).map(|i| VarBound { index: i, lower: -3.0, upper: 3.0 }).collect();
    ConeProgram { objective: random_vector(rng, n), socs, lin_g, lin_h, bounds }
}

#[test]
fn random_socp_certificates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let p = random_socp(&mut rng);
        let sol = solve_cone(&p).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Optimal, "{:?}", sol.report);
        assert!(sol.report.gap <= 1e-7, "{:?}", sol.report);
        assert!(sol.report.primal_residual <= 1e-8, "{:?}", sol.report);
        assert!(sol.report.dual_residual <= 1e-7, "{:?}", sol.report);
        let again = solve_cone(&p).unwrap();
        assert_eq!(sol.y.as_slice(), again.y.as_slice());
        assert_eq!(sol.z.as_slice(), again.z.as_slice());
    }
}

#[test]
fn socp_epigraph_agrees_with_qp() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let n = 4;
        let p = random_qp(&mut rng, n, 6);
        let qp = solve_qp(&p).unwrap();
        // variables [x; t]: 0.5 |L'x|^2 <= t  <=>  ||[L'x; t - 1/2]|| <= t + 1/2
        let l = p.h.clone().cholesky().unwrap().l();
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(&l.transpose());
        a[(n, n)] = 1.0;
        let mut b = DVector::zeros(n + 1);
        b[n] = 0.5;
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let mut objective = DVector::zeros(n + 1);
        objective.rows_mut(0, n).copy_from(&p.g);
        objective[n] = 1.0;
        let mut lin_g = DMatrix::zeros(p.d.len(), n + 1);
        lin_g.view_mut((0, 0), (p.d.len(), n)).copy_from(&p.c);
        let prog = ConeProgram {
            objective,
            socs: vec![SocConstraint { a, b, c, d: 0.5 }],
            lin_g,
            lin_h: p.d.clone(),
            bounds: vec![],
        };
        let sol = solve_cone(&prog).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Optimal);
        assert!((sol.objective - qp.objective).abs() < 1e-6, "{} vs {}", sol.objective, qp.objective);
        // objective error e allows a minimizer error near sqrt(2e / lambda_min(H))
        assert!((sol.y.rows(0, n) - &qp.x).amax() < 1e-4);
    }
}

#[test]
fn infeasible_cone_program() {
    // ||y|| <= 1 and y0 >= 2
    let mut p = ball_program(&DVector::zeros(2), 1.0, &DVector::from_vec(vec![1.0, 0.0]));
    p.bounds = vec![VarBound { index: 0, lower: 2.0, upper: 5.0 }];
    assert_eq!(solve_cone(&p).unwrap().report.status, SolveStatus::Infeasible);
}

#[test]
fn dump_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_socp(&mut rng);
    let text = p.to_json().unwrap();
    let back = ConeProgram::<f64>::from_json(&text).unwrap();
    assert_eq!(p, back);
    let bad = text.replacen("\"objective\"", "\"objectiv\"", 1);
    assert!(ConeProgram::<f64>::from_json(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qp_kkt_holds(seed in any::<u64>(), n in 1usize..6, m in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, n, m);
        let sol = solve_qp(&p).unwrap();
        prop_assert!(sol.report.status.is_optimal());
        prop_assert!(sol.report.primal_residual <= 1e-8);
        prop_assert!(sol.report.dual_residual <= 1e-8);
        prop_assert!(sol.multipliers.iter().all(|&u| u >= 0.0));
        prop_assert!(sol.report.gap <= 1e-8);
    }

    #[test]
    fn socp_solution_is_feasible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_socp(&mut rng);
        let sol = solve_cone(&p).unwrap();
        prop_assert!(sol.report.status.is_optimal());
        prop_assert!(p.max_violation(&sol.y) <= 1e-8);
    }
}

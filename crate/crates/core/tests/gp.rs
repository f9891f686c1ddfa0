use lbfmpc::gp::*;
use lbfmpc::quadrotor::{lemniscate_reference, psi_true, Lemniscate, QuadParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(rng: &mut ChaCha8Rng, n_z: usize, m: usize) -> AffineKernelParams<f64> {
    let mut k = || SeKernel::new(rng.random_range(0.5..2.0), (0..n_z).map(|_| rng.random_range(0.5..2.0)).collect());
    let alpha = k();
    let beta = (0..m).map(|_| k()).collect();
    AffineKernelParams { alpha, beta, noise_std: 0.1 }
}

fn random_gp(seed: u64, n: usize) -> OutputGp<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_z, m) = (3, 2);
    let params = random_params(&mut rng, n_z, m);
    let z = DMatrix::from_fn(n_z, n, |_, _| rng.random_range(-1.0..1.0));
    let nu = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    OutputGp::condition(params, z, nu, y).unwrap()
}

/// Textbook posterior with the full kernel on the augmented input.
fn direct_posterior(gp: &OutputGp<f64>, z_star: &[f64], nu_star: &[f64]) -> (f64, f64) {
    let n = gp.n_train();
    let p = &gp.params;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = p.kernel_eval(gp.z.column(i).as_slice(), gp.nu.column(i).as_slice(), gp.z.column(j).as_slice(), gp.nu.column(j).as_slice());
        }
        k[(i, i)] += p.noise_std * p.noise_std + gp.jitter;
    }
    let kstar = DVector::from_fn(n, |l, _| p.kernel_eval(z_star, nu_star, gp.z.column(l).as_slice(), gp.nu.column(l).as_slice()));
    let lu = k.lu();
    let w = lu.solve(&gp.targets).unwrap();
    let s = lu.solve(&kstar).unwrap();
    let mean = kstar.dot(&w);
    let var = p.kernel_eval(z_star, nu_star, z_star, nu_star) - kstar.dot(&s);
    (mean, var)
}

#[test]
fn gamma_decomposition_matches_direct_posterior() {
    let gp = random_gp(1, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let nu = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let g = gp.gamma(&z);
        let (mean, var) = direct_posterior(&gp, &z, nu.as_slice());
        assert!((g.mean(&nu) - mean).abs() <= 1e-8);
        assert!((g.variance(&nu) - var).abs() <= 1e-8);
    }
}

#[test]
fn gamma_five_is_psd_and_variance_nonnegative() {
    let gp = random_gp(3, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = gp.gamma(&z);
        assert!(g.g5.clone().symmetric_eigenvalues().min() >= -1e-10);
        assert_eq!(g.g5, g.g5.transpose());
        for _ in 0..50 {
            let nu = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            assert!(g.variance(&nu) >= -1e-10);
        }
    }
}

#[test]
fn gram_is_positive_definite() {
    let gp = random_gp(5, 50);
    let k = gram(&gp.params, &gp.z, &gp.nu) + DMatrix::identity(50, 50) * gp.params.noise_std.powi(2);
    assert!(k.symmetric_eigenvalues().min() > 0.0);
    // the cached factor reproduces the inverse
    let l = &gp.chol;
    let kinv = (l * l.transpose()).try_inverse().unwrap();
    assert!((&kinv * &k - DMatrix::identity(50, 50)).amax() < 1e-8);
}

#[test]
fn interpolates_with_tiny_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = random_params(&mut rng, 2, 1);
    params.noise_std = 1e-8;
    let z = DMatrix::from_fn(2, 8, |_, _| rng.random_range(-3.0..3.0));
    let nu = DMatrix::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
    let gp = OutputGp::condition(params, z.clone(), nu.clone(), y.clone()).unwrap();
    for l in 0..8 {
        let (mean, _) = gp.predict(z.column(l).as_slice(), &nu.column(l).into_owned());
        assert!((mean - y[l]).abs() < 1e-4);
    }
}

#[test]
fn duplicate_point_keeps_likelihood_finite() {
    let gp = random_gp(7, 10);
    let mut z = gp.z.clone().insert_column(10, 0.0);
    z.set_column(10, &gp.z.column(0));
    let mut nu = gp.nu.clone().insert_column(10, 0.0);
    nu.set_column(10, &gp.nu.column(0));
    let y = gp.targets.clone().insert_row(10, gp.targets[0]);
    let mut params = gp.params.clone();
    params.noise_std = 1e-9;
    let (lml, grad) = log_marginal_likelihood(&params, &z, &nu, &y).unwrap();
    assert!(lml.is_finite() && grad.iter().all(|g| g.is_finite()));
    assert!(OutputGp::condition(params, z, nu, y).is_ok());
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let gp = random_gp(8, 25);
    let theta = gp.params.to_log_vec();
    let (_, grad) = log_marginal_likelihood(&gp.params, &gp.z, &gp.nu, &gp.targets).unwrap();
    let h = 1e-6;
    for p in 0..theta.len() {
        let mut tp = theta.clone();
        tp[p] += h;
        let mut tm = theta.clone();
        tm[p] -= h;
        let f = |t: &DVector<f64>| {
            let prm = AffineKernelParams::from_log_vec(t, 3, 2).unwrap();
            log_marginal_likelihood(&prm, &gp.z, &gp.nu, &gp.targets).unwrap().0
        };
        let fd = (f(&tp) - f(&tm)) / (2.0 * h);
        assert!((fd - grad[p]).abs() < 1e-5 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", grad[p]);
    }
}

#[test]
fn output_dimensions_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = Dataset {
        points: (0..30)
            .map(|_| GpDataPoint {
                z: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                nu: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                v: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
            })
            .collect(),
    };
    let opts = FitOptions { restarts: 1, max_iterations: 20, ..Default::default() };
    let (a, _) = fit(&data, &opts).unwrap();
    let mut other = data.clone();
    for p in &mut other.points {
        p.v[1] += 0.5;
    }
    let (b, _) = fit(&other, &opts).unwrap();
    let z = DVector::from_vec(vec![0.1, -0.2]);
    assert_eq!(a.gamma_terms(&z).unwrap()[0], b.gamma_terms(&z).unwrap()[0]);
    assert_ne!(a.gamma_terms(&z).unwrap()[1], b.gamma_terms(&z).unwrap()[1]);
}

#[test]
fn fit_improves_likelihood_and_recovers_lengthscales() {
    // samples from the prior of a known kernel
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let truth = AffineKernelParams {
        alpha: SeKernel::new(1.0, vec![0.5, 2.0]),
        beta: vec![SeKernel::new(0.5, vec![1.0, 1.0])],
        noise_std: 0.05,
    };
    let n = 200;
    let z = DMatrix::from_fn(2, n, |_, _| rng.random_range(-3.0..3.0));
    let nu = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
    let k = gram(&truth, &z, &nu) + DMatrix::identity(n, n) * (0.05f64.powi(2) + 1e-10);
    let l = k.cholesky().unwrap().l();
    let e = DVector::from_fn(n, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng));
    let y = l * e;
    let opts = FitOptions { restarts: 2, ..Default::default() };
    let (gp, rep) = fit_output(&z, &nu, &y, None, &opts).unwrap();
    assert!(rep.lml >= rep.lml_init);
    let la = &gp.params.alpha.lengthscales;
    assert!((la[0] / 0.5 - 1.0).abs() <= 0.2, "{la:?}");
    assert!((la[1] / 2.0 - 1.0).abs() <= 0.2, "{la:?}");
}

fn small_quad_dataset(n: usize, seed: u64, jitter: bool) -> Dataset<f64> {
    let p = QuadParams::default();
    let shape = Lemniscate { amplitude_x: 1.0, amplitude_z: 0.5, period: 6.0, center_x: 0.0, center_z: 1.0 };
    let r = lemniscate_reference(&shape, 0.01, 300).unwrap();
    let mut cfg = SamplingConfig { n, seed, ..Default::default() };
    if !jitter {
        cfg.z_jitter = vec![0.0; 8];
        cfg.nu_jitter = vec![0.0; 2];
        cfg.noise_std = 0.0;
    }
    sample_training_data(&r, &p, &cfg).unwrap()
}

#[test]
fn sampling_is_deterministic_and_exact_without_noise() {
    let a = small_quad_dataset(50, 3, true);
    let b = small_quad_dataset(50, 3, true);
    assert_eq!(a, b);
    let clean = small_quad_dataset(20, 4, false);
    let p = QuadParams::default();
    for q in &clean.points {
        let v = psi_true(&q.z, &q.nu, &p).unwrap().v;
        assert_eq!(q.v[0], v[0]);
        assert_eq!(q.v[1], v[1]);
    }
}

#[test]
fn csv_and_artifact_round_trip() {
    let dir = std::env::temp_dir().join(format!("lbfmpc-gp-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let data = small_quad_dataset(40, 5, true);
    let path = dir.join("data.csv");
    data.write_csv(&path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "z0,z1,z2,z3,z4,z5,z6,z7,nu0,nu1,v0,v1");
    let back = Dataset::<f64>::read_csv(&path).unwrap();
    assert_eq!(back, data);

    let opts = FitOptions { restarts: 1, max_iterations: 30, ..Default::default() };
    let (gp, _) = fit(&data, &opts).unwrap();
    let art = GpArtifact::from_gp(&gp);
    let file = dir.join("gp.json");
    art.save(&file).unwrap();
    let loaded: AffineGp<f64> = GpArtifact::load(&file).unwrap().to_gp().unwrap();
    let z = data.points[3].z.clone();
    let ga = gp.gamma_terms(&z).unwrap();
    let gb = loaded.gamma_terms(&z).unwrap();
    for (x, y) in ga.iter().zip(&gb) {
        assert!((x.g1 - y.g1).abs() < 1e-9 && (x.g3 - y.g3).abs() < 1e-9);
    }
    let mut bad = art.clone();
    bad.version = 99;
    assert!(bad.to_gp::<f64>().is_err());
    let mut tampered = art;
    tampered.outputs[0].weights[0] += 1.0;
    assert!(tampered.to_gp::<f64>().is_err());
    std::fs::remove_dir_all(&dir).ok();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_holds_for_random_models(seed in any::<u64>(), n in 0usize..30) {
        let gp = random_gp(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let nu = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let g = gp.gamma(&z);
        let (mean, var) = direct_posterior(&gp, &z, nu.as_slice());
        prop_assert!((g.mean(&nu) - mean).abs() <= 1e-8);
        prop_assert!((g.variance(&nu) - var).abs() <= 1e-8);
    }

    #[test]
    fn mean_is_affine_in_nu(seed in any::<u64>(), t in -2.0f64..2.0) {
        let gp = random_gp(seed, 15);
        let z = [0.1, 0.2, -0.3];
        let a = DVector::from_vec(vec![0.3, -0.7]);
        let b = DVector::from_vec(vec![-1.1, 0.4]);
        let mix = &a * t + &b * (1.0 - t);
        let (ma, _) = gp.predict(&z, &a);
        let (mb, _) = gp.predict(&z, &b);
        let (mm, _) = gp.predict(&z, &mix);
        prop_assert!((mm - (t * ma + (1.0 - t) * mb)).abs() < 1e-9);
    }
}

//! GP training pipeline and held-out calibration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::gp::{fit, sample_training_data, AffineGp, Dataset, FitOptions, FitReport, GpArtifact};
use crate::quadrotor::psi_true;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputCalibration {
    /// Range of the noiseless held-out targets.
    pub range: f64,
    /// RMSE of the posterior mean against the noiseless targets.
    pub rmse: f64,
    pub relative_rmse: f64,
    /// Share of noiseless targets within two latent standard deviations.
    pub coverage_latent: f64,
    /// Share of noisy held-out targets within two predictive standard deviations.
    pub coverage_observed: f64,
    pub mean_std: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_train: usize,
    pub n_holdout: usize,
    pub outputs: Vec<OutputCalibration>,
    pub rmse_gate: f64,
    pub coverage_target: f64,
    pub passed: bool,
    pub fit: Option<FitReport>,
    pub fit_seconds: f64,
}

/// Training and held-out sets drawn with independent seeds.
pub fn generate_data(cfg: &RunConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let reference = cfg.sampling_reference()?;
    let mut sampling = cfg.gp.sampling.clone();
    sampling.seed = sampling.seed.wrapping_add(cfg.seed);
    let train = sample_training_data(&reference, &cfg.plant, &sampling)?;
    sampling.n = cfg.gp.holdout;
    sampling.seed = sampling.seed.wrapping_add(0x9e37_79b9);
    let holdout = sample_training_data(&reference, &cfg.plant, &sampling)?;
    Ok((train, holdout))
}

/// Accuracy and coverage of `gp` on `holdout`.
pub fn calibrate(cfg: &RunConfig, gp: &AffineGp<f64>, holdout: &Dataset<f64>) -> Result<Vec<OutputCalibration>> {
    if holdout.is_empty() {
        return Err(Error::InvalidArgument("empty held-out set".into()));
    }
    let m = gp.m();
    let n = holdout.len() as f64;
    let mut out = Vec::with_capacity(m);
    let mut preds = Vec::with_capacity(holdout.len());
    for q in &holdout.points {
        let (mu, var) = gp.predict(&q.z, &q.nu)?;
        let truth = psi_true(&q.z, &q.nu, &cfg.plant)?.v;
        preds.push((mu, var, truth));
    }
    for i in 0..m {
        let sn = gp.outputs[i].params.noise_std;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut se, mut sd, mut hit_latent, mut hit_obs) = (0.0, 0.0, 0usize, 0usize);
        for (q, (mu, var, truth)) in holdout.points.iter().zip(&preds) {
            let s = var[i].max(0.0).sqrt();
            lo = lo.min(truth[i]);
            hi = hi.max(truth[i]);
            se += (mu[i] - truth[i]).powi(2);
            sd += s;
            if (mu[i] - truth[i]).abs() <= 2.0 * s {
                hit_latent += 1;
            }
            if (mu[i] - q.v[i]).abs() <= 2.0 * (s * s + sn * sn).sqrt() {
                hit_obs += 1;
            }
        }
        let rmse = (se / n).sqrt();
        let range = hi - lo;
        out.push(OutputCalibration {
            range,
            rmse,
            relative_rmse: if range > 0.0 { rmse / range } else { f64::INFINITY },
            coverage_latent: hit_latent as f64 / n,
            coverage_observed: hit_obs as f64 / n,
            mean_std: sd / n,
            noise_std: sn,
        });
    }
    Ok(out)
}

/// Fit options with the run seed folded in.
pub fn fit_options(cfg: &RunConfig) -> FitOptions {
    let mut opts = cfg.gp.fit.clone();
    opts.seed = opts.seed.wrapping_add(cfg.seed);
    opts
}

/// Fit one GP per output and attach the configured confidence multipliers.
pub fn train_gp(cfg: &RunConfig, train: &Dataset<f64>) -> Result<(AffineGp<f64>, FitReport)> {
    let (mut gp, report) = fit(train, &fit_options(cfg))?;
    gp.set_confidence(cfg.gp.confidence, cfg.gp.delta)?;
    Ok((gp, report))
}

pub fn report_for(cfg: &RunConfig, outputs: Vec<OutputCalibration>, n_train: usize, n_holdout: usize) -> CalibrationReport {
    let passed = outputs.iter().all(|o| o.relative_rmse <= cfg.gp.rmse_gate);
    CalibrationReport {
        n_train,
        n_holdout,
        outputs,
        rmse_gate: cfg.gp.rmse_gate,
        coverage_target: cfg.gp.coverage_target,
        passed,
        fit: None,
        fit_seconds: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: PathBuf,
    pub report: CalibrationReport,
    pub gp: AffineGp<f64>,
}

/// Sample, fit, calibrate and write `gp.json`, `calibration.json`,
/// `train.csv` and `holdout.csv` into `out`.
///
/// Files are written before the RMSE gate is checked.
pub fn train_pipeline(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let (train, holdout) = generate_data(cfg)?;
    let clock = Instant::now();
    let (gp, fit_report) = train_gp(cfg, &train)?;
    let fit_seconds = clock.elapsed().as_secs_f64();
    let outputs = calibrate(cfg, &gp, &holdout)?;
    let mut report = report_for(cfg, outputs, train.len(), holdout.len());
    report.fit = Some(fit_report);
    report.fit_seconds = fit_seconds;

    let artifact = out.join("gp.json");
    GpArtifact::from_gp(&gp).save(&artifact)?;
    std::fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&report)?)?;
    train.write_csv(&out.join("train.csv"))?;
    holdout.write_csv(&out.join("holdout.csv"))?;
    if !report.passed {
        let worst = report.outputs.iter().map(|o| o.relative_rmse).fold(0.0, f64::max);
        return Err(Error::Calibration(format!(
            "held-out relative RMSE {worst:.4} above gate {}",
            cfg.gp.rmse_gate
        )));
    }
    Ok(TrainOutcome { artifact, report, gp })
}

/// Load an artifact and apply the configured confidence multipliers.
pub fn load_gp(cfg: &RunConfig, path: &Path) -> Result<AffineGp<f64>> {
    let mut gp: AffineGp<f64> = GpArtifact::load(path)?.to_gp()?;
    if gp.n_z() != 8 || gp.m() != 2 {
        return Err(Error::Config(format!("artifact {} has the wrong dimensions", path.display())));
    }
    gp.set_confidence(cfg.gp.confidence, cfg.gp.delta)?;
    Ok(gp)
}

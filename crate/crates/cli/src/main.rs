use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lbfmpc::harness::{
    self, compare, generate_data, load_gp, run_episode, run_episode_observed, train_pipeline, write_compare_csv,
    write_plots, write_steps_csv, write_timeseries_csv, CompareRow, Mode, RunConfig,
};
use lbfmpc::{AffineGpF64, Error, Result};

#[derive(Parser)]
#[command(name = "lbfmpc", version, about = "Learning-based flat MPC on the planar quadrotor")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Sample data, fit the GP and write the artifact with its calibration.
    Train(Common),
    /// One closed-loop episode.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gp: Option<PathBuf>,
    },
    /// Learned and exact-inversion loops over the configured trials.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gp: Option<PathBuf>,
    },
    /// Write the safety-filter cone program of one step as JSON.
    DumpSocp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gp: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Held-out accuracy and coverage of a trained artifact.
    ValidateGp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gp: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "learned")]
    mode: Mode,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Artifact from `--gp`, else from the configuration, else trained into `out/gp`.
fn obtain_gp(cfg: &RunConfig, explicit: Option<&Path>, out: &Path) -> Result<AffineGpF64> {
    if let Some(p) = explicit.map(Path::to_path_buf).or_else(|| cfg.gp.artifact.as_ref().map(PathBuf::from)) {
        return load_gp(cfg, &p);
    }
    eprintln!("no GP artifact given, training one into {}", out.join("gp").display());
    Ok(train_pipeline(cfg, &out.join("gp"))?.gp)
}

fn needs_gp(mode: Mode) -> bool {
    mode == Mode::Learned
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let outcome = train_pipeline(&cfg, &c.out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    println!("artifact: {}", outcome.artifact.display());
    Ok(())
}

fn run(c: &Common, gp_path: Option<&Path>) -> Result<()> {
    let cfg = c.config()?;
    std::fs::create_dir_all(&c.out)?;
    let gp = if needs_gp(c.mode) { Some(obtain_gp(&cfg, gp_path, &c.out)?) } else { None };
    let ep = run_episode(&cfg, c.mode, gp.as_ref(), cfg.seed)?;
    write_steps_csv(&ep.steps, &c.out.join("steps.csv"))?;
    write_json(&c.out.join("metrics.json"), &ep.metrics)?;
    let runs = vec![(c.mode, vec![ep])];
    write_timeseries_csv(&runs, &c.out.join("timeseries.csv"))?;
    write_plots(&cfg, &runs, &c.out)?;
    let ep = &runs[0].1[0];
    println!("{}", serde_json::to_string_pretty(&ep.metrics)?);
    if ep.metrics.aborted {
        return Err(Error::Aborted { step: ep.steps.len().saturating_sub(1), consecutive: cfg.filter.max_consecutive_infeasible + 1 });
    }
    Ok(())
}

fn compare_modes(c: &Common, gp_path: Option<&Path>) -> Result<()> {
    let cfg = c.config()?;
    std::fs::create_dir_all(&c.out)?;
    let gp = obtain_gp(&cfg, gp_path, &c.out)?;
    let runs = compare(&cfg, &[Mode::Learned, Mode::ExactPsi], Some(&gp))?;
    let rows: Vec<CompareRow> = runs.iter().map(|(m, eps)| CompareRow::from_episodes(*m, eps)).collect();
    write_compare_csv(&rows, &c.out.join("compare.csv"))?;
    write_timeseries_csv(&runs, &c.out.join("timeseries.csv"))?;
    write_plots(&cfg, &runs, &c.out)?;
    for (m, eps) in &runs {
        for (i, e) in eps.iter().enumerate() {
            write_steps_csv(&e.steps, &c.out.join(format!("steps_{}_{i}.csv", m.as_str())))?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&rows)?);
    if let Some((m, e)) = runs.iter().flat_map(|(m, eps)| eps.iter().map(move |e| (m, e))).find(|(_, e)| e.metrics.aborted) {
        eprintln!("{} episode with seed {} aborted", m, e.seed);
        return Err(Error::Aborted { step: e.steps.len().saturating_sub(1), consecutive: cfg.filter.max_consecutive_infeasible + 1 });
    }
    Ok(())
}

fn dump_socp(c: &Common, gp_path: Option<&Path>, step: usize) -> Result<()> {
    let cfg = c.config()?;
    if step >= cfg.n_steps() {
        return Err(Error::Config(format!("step {step} past the episode end {}", cfg.n_steps())));
    }
    std::fs::create_dir_all(&c.out)?;
    let gp = obtain_gp(&cfg, gp_path, &c.out)?;
    let mut short = cfg.clone();
    short.episode_periods = (step + 1) as f64 * cfg.dt() / cfg.reference.period;
    let mut dump = None;
    let mut grab = |k: usize, res: &lbfmpc::FilterResultF64| {
        if k == step {
            dump = Some((res.program.to_json(), res.level, res.report.clone()));
        }
    };
    run_episode_observed(&short, Mode::Learned, Some(&gp), short.seed, Some(&mut grab))?;
    let Some((json, level, report)) = dump else {
        return Err(Error::Aborted { step, consecutive: 0 });
    };
    let path = c.out.join(format!("socp_step{step}.json"));
    std::fs::write(&path, json?)?;
    println!("{path}: level {level:?}, status {:?}, {} iterations", report.status, report.iterations, path = path.display());
    Ok(())
}

fn validate_gp(c: &Common, gp_path: Option<&Path>) -> Result<()> {
    let cfg = c.config()?;
    let path = gp_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.gp.artifact.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("validate-gp needs --gp or gp.artifact".into()))?;
    let gp = load_gp(&cfg, &path)?;
    let (train, holdout) = generate_data(&cfg)?;
    let outputs = harness::calibrate(&cfg, &gp, &holdout)?;
    let report = harness::train::report_for(&cfg, outputs, train.len(), holdout.len());
    std::fs::create_dir_all(&c.out)?;
    write_json(&c.out.join("validation.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed {
        return Err(Error::Calibration(format!("held-out relative RMSE above gate {}", cfg.gp.rmse_gate)));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.verb {
        Verb::Train(c) => train(c),
        Verb::Run { common, gp } => run(common, gp.as_deref()),
        Verb::Compare { common, gp } => compare_modes(common, gp.as_deref()),
        Verb::DumpSocp { common, gp, step } => dump_socp(common, gp.as_deref(), *step),
        Verb::ValidateGp { common, gp } => validate_gp(common, gp.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

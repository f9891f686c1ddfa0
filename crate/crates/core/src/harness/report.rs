//! CSV export and static SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::episode::{run_trials, Episode, StepLog};
use crate::error::Result;
use crate::gp::AffineGp;

fn status_str(s: crate::conic::SolveStatus) -> &'static str {
    use crate::conic::SolveStatus::*;
    match s {
        Optimal => "optimal",
        Infeasible => "infeasible",
        Unbounded => "unbounded",
        MaxIterations => "max_iterations",
    }
}

/// Header of the per-step CSV for `n_z` states, `m` inputs and `n_c` half-spaces.
pub fn step_header(n_z: usize, m: usize, eta: usize, n_c: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["k".into(), "t".into()];
    h.extend((0..n_z).map(|i| format!("z{i}")));
    h.extend((0..n_z).map(|i| format!("zref{i}")));
    h.extend((0..m).map(|i| format!("v{i}")));
    h.extend((0..m).map(|i| format!("nu{i}")));
    h.extend((0..eta).map(|i| format!("eta{i}")));
    h.extend((0..m).map(|i| format!("u{i}")));
    h.extend(
        [
            "lyapunov",
            "lyapunov_next",
            "mpc_status",
            "mpc_gap",
            "mpc_residual",
            "source",
            "filter_status",
            "filter_gap",
            "filter_residual",
        ]
        .map(String::from),
    );
    h.extend((0..n_c).map(|j| format!("margin{j}")));
    h.extend(
        ["active", "violation_next", "thrust_excess", "thrust_bound_active", "fmpc_us", "filter_us"].map(String::from),
    );
    h
}

fn step_record(s: &StepLog) -> Vec<String> {
    let f = |x: &f64| format!("{x:e}");
    let mut r = vec![s.k.to_string(), f(&s.t)];
    for v in [&s.z_hat, &s.z_ref, &s.v_star, &s.nu, &s.eta_prev, &s.u] {
        r.extend(v.iter().map(f));
    }
    r.push(f(&s.lyapunov));
    r.push(f(&s.lyapunov_next));
    r.push(status_str(s.mpc_status).into());
    r.push(f(&s.mpc_gap));
    r.push(f(&s.mpc_residual));
    r.push(s.source.as_str().into());
    r.push(s.filter_status.map_or("", status_str).into());
    r.push(s.filter_gap.as_ref().map_or(String::new(), f));
    r.push(s.filter_residual.as_ref().map_or(String::new(), f));
    r.extend(s.margins.iter().map(f));
    r.push(s.active.join(";"));
    r.push(f(&s.violation_next));
    r.push(f(&s.thrust_excess));
    r.push(s.thrust_bound_active.to_string());
    r.push(f(&s.fmpc_us));
    r.push(f(&s.filter_us));
    r
}

/// Per-step CSV; floats use round-trip exponent formatting.
pub fn write_steps_csv(steps: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let first = steps.first();
    let n_z = first.map_or(8, |s| s.z_hat.len());
    let m = first.map_or(2, |s| s.nu.len());
    let eta = first.map_or(3, |s| s.eta_prev.len());
    let n_c = first.map_or(0, |s| s.margins.len());
    w.write_record(step_header(n_z, m, eta, n_c))?;
    for s in steps {
        w.write_record(step_record(s))?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: String,
    pub trials: usize,
    pub aborted: usize,
    pub rmse_mean: f64,
    pub rmse_post_mean: f64,
    pub rmse_post_max: f64,
    pub max_violation: Option<f64>,
    pub max_input_violation: Option<f64>,
    pub lyapunov_decrease_min: Option<f64>,
    pub infeasible_steps: usize,
    pub max_gap: f64,
    pub max_residual: f64,
    pub fmpc_mean_us: f64,
    pub filter_mean_us: f64,
    pub step_mean_us: f64,
    pub step_p50_us: f64,
    pub step_p95_us: f64,
}

impl CompareRow {
    pub fn from_episodes(mode: Mode, episodes: &[Episode]) -> Self {
        let n = episodes.len().max(1) as f64;
        let fold_max = |f: &dyn Fn(&Episode) -> Option<f64>| episodes.iter().filter_map(f).reduce(f64::max);
        let mut totals: Vec<f64> =
            episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.fmpc_us + s.filter_us)).collect();
        totals.sort_by(|a, b| a.total_cmp(b));
        let pct = |q: f64| {
            if totals.is_empty() {
                0.0
            } else {
                totals[((q * totals.len() as f64).ceil() as usize).clamp(1, totals.len()) - 1]
            }
        };
        let steps: usize = episodes.iter().map(|e| e.steps.len()).sum::<usize>().max(1);
        let sum_steps = |f: &dyn Fn(&StepLog) -> f64| {
            episodes.iter().flat_map(|e| e.steps.iter()).map(f).sum::<f64>() / steps as f64
        };
        Self {
            mode: mode.as_str().into(),
            trials: episodes.len(),
            aborted: episodes.iter().filter(|e| e.metrics.aborted).count(),
            rmse_mean: episodes.iter().map(|e| e.metrics.rmse).sum::<f64>() / n,
            rmse_post_mean: episodes.iter().map(|e| e.metrics.rmse_post).sum::<f64>() / n,
            rmse_post_max: fold_max(&|e| Some(e.metrics.rmse_post)).unwrap_or(0.0),
            max_violation: fold_max(&|e| e.metrics.max_violation),
            max_input_violation: fold_max(&|e| e.metrics.max_input_violation),
            lyapunov_decrease_min: episodes.iter().filter_map(|e| e.metrics.lyapunov_decrease).reduce(f64::min),
            infeasible_steps: episodes.iter().map(|e| e.metrics.infeasible_steps).sum(),
            max_gap: fold_max(&|e| Some(e.metrics.max_gap)).unwrap_or(0.0),
            max_residual: fold_max(&|e| Some(e.metrics.max_residual)).unwrap_or(0.0),
            fmpc_mean_us: sum_steps(&|s| s.fmpc_us),
            filter_mean_us: sum_steps(&|s| s.filter_us),
            step_mean_us: sum_steps(&|s| s.fmpc_us + s.filter_us),
            step_p50_us: pct(0.5),
            step_p95_us: pct(0.95),
        }
    }
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_compare_csv(path: &Path) -> Result<Vec<CompareRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Run every mode over `cfg.trials` trials on the same seeds.
pub fn compare(cfg: &RunConfig, modes: &[Mode], gp: Option<&AffineGp<f64>>) -> Result<Vec<(Mode, Vec<Episode>)>> {
    modes.iter().map(|&mode| Ok((mode, run_trials(cfg, mode, gp)?))).collect()
}

/// Long-format time series `mode, trial, k, t, x, z, x_ref, z_ref, err, thrust` for plotting.
pub fn write_timeseries_csv(runs: &[(Mode, Vec<Episode>)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "trial", "k", "t", "x", "z", "x_ref", "z_ref", "err", "thrust"])?;
    for (mode, eps) in runs {
        for (i, e) in eps.iter().enumerate() {
            for s in &e.steps {
                let err = ((s.z_hat[0] - s.z_ref[0]).powi(2) + (s.z_hat[4] - s.z_ref[4]).powi(2)).sqrt();
                w.write_record([
                    mode.as_str().to_string(),
                    i.to_string(),
                    s.k.to_string(),
                    format!("{:e}", s.t),
                    format!("{:e}", s.z_hat[0]),
                    format!("{:e}", s.z_hat[4]),
                    format!("{:e}", s.z_ref[0]),
                    format!("{:e}", s.z_ref[4]),
                    format!("{err:e}"),
                    format!("{:e}", s.u[0]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// A named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

/// Static SVG line chart with axes, ticks and a legend. `hlines` are dashed levels.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], hlines: &[(String, f64)]) -> String {
    let (w, h) = (720.0, 440.0);
    let (l, r, t, b) = (70.0, 20.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    for (_, y) in hlines {
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let sy = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - l - r,
        h - t - b
    );
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(svg, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#, sx(fx), h - b, h - b + 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), h - b + 18.0, tick(fx));
        let _ = writeln!(svg, r#"<line x1="{}" y1="{1}" x2="{l}" y2="{1}" stroke="black"/>"#, l - 5.0, sy(fy));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 8.0, sy(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    for (name, y) in hlines {
        let _ = writeln!(
            svg,
            r#"<line x1="{l}" y1="{0}" x2="{1}" y2="{0}" stroke="black" stroke-dasharray="6 4"/><text x="{2}" y="{3}" text-anchor="end">{4}</text>"#,
            sy(*y),
            w - r,
            w - r - 4.0,
            sy(*y) - 4.0,
            escape(name)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = t + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
            l + 10.0,
            ly,
            l + 30.0,
            l + 36.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Trajectory, tracking error and thrust charts of the first trial of every run.
pub fn write_plots(cfg: &RunConfig, runs: &[(Mode, Vec<Episode>)], dir: &Path) -> Result<()> {
    let firsts: Vec<(Mode, &Episode)> = runs.iter().filter_map(|(m, e)| e.first().map(|e| (*m, e))).collect();
    let Some((_, base)) = firsts.first() else { return Ok(()) };

    let mut traj = vec![Series {
        name: "reference".into(),
        points: base.steps.iter().map(|s| (s.z_ref[0], s.z_ref[4])).collect(),
    }];
    let mut err = Vec::new();
    let mut thrust = Vec::new();
    for (mode, e) in &firsts {
        traj.push(Series { name: mode.to_string(), points: e.steps.iter().map(|s| (s.z_hat[0], s.z_hat[4])).collect() });
        err.push(Series {
            name: mode.to_string(),
            points: e
                .steps
                .iter()
                .map(|s| (s.t, ((s.z_hat[0] - s.z_ref[0]).powi(2) + (s.z_hat[4] - s.z_ref[4]).powi(2)).sqrt()))
                .collect(),
        });
        thrust.push(Series { name: mode.to_string(), points: e.steps.iter().map(|s| (s.t, s.u[0])).collect() });
    }
    let (z_lo, z_hi) = base.steps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.z_ref[4]).min(s.z_hat[4]), hi.max(s.z_ref[4]).max(s.z_hat[4]))
    });
    for hs in &cfg.constraints.half_spaces {
        let single_x = hs.h[0] != 0.0 && hs.h.iter().skip(1).all(|x| *x == 0.0);
        if single_x && z_lo.is_finite() {
            let x = hs.b / hs.h[0];
            traj.push(Series { name: format!("x = {x:.2}"), points: vec![(x, z_lo), (x, z_hi)] });
        }
    }
    let traj_svg = line_chart("Flat output trajectory", "x [m]", "z [m]", &traj, &[]);
    std::fs::write(dir.join("trajectory.svg"), traj_svg)?;
    std::fs::write(dir.join("tracking_error.svg"), line_chart("Position error", "t [s]", "|p - p_ref| [m]", &err, &[]))?;
    let bounds = [
        ("T_c max".to_string(), cfg.constraints.u_max[0]),
        ("T_c min".to_string(), cfg.constraints.u_min[0]),
    ];
    std::fs::write(dir.join("thrust.svg"), line_chart("Thrust command", "t [s]", "T_c", &thrust, &bounds))?;
    Ok(())
}

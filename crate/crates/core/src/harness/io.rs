//! CSV and JSON artifacts.
//!
//! `trajectory.csv` has one row per sample `t = 0..T` with the header
//! `t,time,q1_true,q2_true,dq1_true,dq2_true,mode_true,y1,y2,q1_est,q2_est,dq1_est,dq2_est,mode_est,w_tilde_1..w_tilde_M`.
//! Floats are written with 17 significant digits so that they re-parse to
//! the same bits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss_newton::ConvergenceReport;

use super::config::ScenarioConfig;
use super::metrics::RunMetrics;

const FIXED_COLUMNS: [&str; 14] = [
    "t", "time", "q1_true", "q2_true", "dq1_true", "dq2_true", "mode_true", "y1", "y2", "q1_est", "q2_est", "dq1_est",
    "dq2_est", "mode_est",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub time: f64,
    pub x_true: [f64; 4],
    pub mode_true: usize,
    pub y: [f64; 2],
    pub x_est: [f64; 4],
    pub mode_est: usize,
    pub w_tilde: Vec<f64>,
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectory_header(modes: usize) -> String {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=modes).map(|m| format!("w_tilde_{m}")));
    cols.join(",")
}

pub fn trajectory_csv(rows: &[TrajectoryRow], modes: usize) -> String {
    let mut out = trajectory_header(modes);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},", r.t, fmt_float(r.time));
        for v in r.x_true {
            let _ = write!(out, "{},", fmt_float(v));
        }
        let _ = write!(out, "{},", r.mode_true);
        for v in r.y.iter().chain(&r.x_est) {
            let _ = write!(out, "{},", fmt_float(*v));
        }
        let _ = write!(out, "{}", r.mode_est);
        for v in &r.w_tilde {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        out.push('\n');
    }
    out
}

fn parse<T: std::str::FromStr>(field: &str, line: usize, col: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {col} from {field:?}")))
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty trajectory csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let modes = cols.len().saturating_sub(FIXED_COLUMNS.len());
    if cols.len() <= FIXED_COLUMNS.len() || header != trajectory_header(modes) {
        return Err(Error::Config(format!("unexpected trajectory header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Config(format!("line {n}: expected {} fields, got {}", cols.len(), f.len())));
        }
        let float = |k: usize| parse::<f64>(f[k], n, cols[k]);
        rows.push(TrajectoryRow {
            t: parse(f[0], n, "t")?,
            time: float(1)?,
            x_true: [float(2)?, float(3)?, float(4)?, float(5)?],
            mode_true: parse(f[6], n, "mode_true")?,
            y: [float(7)?, float(8)?],
            x_est: [float(9)?, float(10)?, float(11)?, float(12)?],
            mode_est: parse(f[13], n, "mode_est")?,
            w_tilde: (14..f.len()).map(float).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    parse_trajectory_csv(&std::fs::read_to_string(path)?)
}

pub const CONVERGENCE_HEADER: &str = "iteration,objective,loss,model_decrease,step,direction_norm";

/// One row per outer iterate; `model_decrease`, `step` and `direction_norm`
/// are empty where the loop stopped before computing them.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from(CONVERGENCE_HEADER);
    out.push('\n');
    let opt = |v: Option<&f64>| v.map(|v| fmt_float(*v)).unwrap_or_default();
    for (k, (obj, loss)) in report.objective_trace.iter().zip(&report.loss_trace).enumerate() {
        let _ = writeln!(
            out,
            "{k},{},{},{},{},{}",
            fmt_float(*obj),
            fmt_float(*loss),
            opt(report.model_decrease.get(k)),
            opt(report.step_sizes.get(k)),
            opt(report.direction_norms.get(k)),
        );
    }
    out
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub convergence: ConvergenceReport,
    pub config: ScenarioConfig,
    pub seed: u64,
    pub impacts: Vec<usize>,
    pub mode_names: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

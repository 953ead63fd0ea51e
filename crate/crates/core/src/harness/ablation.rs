use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::io::{fmt_float, write_json};
use super::metrics::RunMetrics;
use super::{run_scenario, ScenarioOutcome};
use crate::error::{Error, Result};
use crate::gauss_newton::{DirectionMode, StopReason};
use crate::model::ProcessPenalty;
use crate::oscillators::{MeasurementModel, ModelKind};

/// Iteration cap for the steepest-descent side of the `gauss_newton` ablation.
pub const STEEPEST_DESCENT_CAP: usize = 2000;
/// Seeds of the `students_t` ablation.
pub const STUDENTS_T_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationName {
    StudentsT,
    GaussNewton,
    Smoothing,
    Onboard,
    Nonlinear,
}

impl AblationName {
    pub const ALL: [AblationName; 5] = [
        Self::StudentsT,
        Self::GaussNewton,
        Self::Smoothing,
        Self::Onboard,
        Self::Nonlinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::StudentsT => "students_t",
            Self::GaussNewton => "gauss_newton",
            Self::Smoothing => "smoothing",
            Self::Onboard => "onboard",
            Self::Nonlinear => "nonlinear",
        }
    }
}

impl FromStr for AblationName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub metrics: RunMetrics,
    /// `ρ(F(x))` strictly decreased on every accepted step.
    pub strictly_decreasing: bool,
    pub objective_initial: f64,
    pub objective_final: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCheck {
    pub description: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: AblationName,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<AblationCheck>,
}

impl AblationTable {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,seed,accuracy,rmse_q1,rmse_q2,rmse_dq1,rmse_dq2,rmse_status,switches_estimate,switches_true,\
             impact_window_foot_velocity_rmse,iterations,stop_reason,final_model_decrease,max_direction_norm\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            let stop = serde_json::to_value(m.stop_reason).expect("serializes");
            let _ = write!(out, "{},{},{},", r.label, r.seed, fmt_float(m.accuracy));
            for v in m.rmse {
                let _ = write!(out, "{},", fmt_float(v));
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                m.rmse_status,
                m.switches_estimate,
                m.switches_true,
                m.impact_window_foot_velocity_rmse.map(fmt_float).unwrap_or_default(),
                m.iterations,
                stop.as_str().unwrap_or_default(),
                fmt_float(m.final_model_decrease),
                fmt_float(m.max_direction_norm),
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("ablation.json"), self)?;
        std::fs::write(dir.join("ablation.csv"), self.to_csv())?;
        Ok(())
    }
}

fn jobs(name: AblationName, base: &ScenarioConfig) -> Vec<(String, ScenarioConfig)> {
    let linear = ScenarioConfig {
        model: ModelKind::Linear,
        mode_init: "A_down".into(),
        hopper: None,
        output_dir: None,
        ..base.clone()
    };
    let nonlinear = ScenarioConfig {
        model: ModelKind::Nonlinear,
        mode_init: "A".into(),
        ..linear.clone()
    };
    let with_penalty = |c: &ScenarioConfig, penalty| {
        let mut c = c.clone();
        c.estimator.penalty = penalty;
        c
    };
    match name {
        AblationName::StudentsT => STUDENTS_T_SEEDS
            .iter()
            .flat_map(|&seed| {
                let c = ScenarioConfig { known_modes: true, seed, ..linear.clone() };
                [
                    (format!("student_t_seed{seed}"), with_penalty(&c, ProcessPenalty::StudentT { dof: 0.01 })),
                    (format!("gaussian_seed{seed}"), with_penalty(&c, ProcessPenalty::Gaussian)),
                ]
            })
            .collect(),
        AblationName::GaussNewton => {
            let c = ScenarioConfig { known_modes: true, ..linear };
            let mut sd = ScenarioConfig { direction: DirectionMode::SteepestDescent, ..c.clone() };
            sd.estimator.outer_max_iters = STEEPEST_DESCENT_CAP;
            vec![("gauss_newton".into(), c), ("steepest_descent".into(), sd)]
        }
        AblationName::Smoothing => {
            let mut off = linear.clone();
            off.estimator.nu = 0.0;
            let mut on = linear;
            if on.estimator.nu <= 0.0 {
                on.estimator.nu = 1.0;
            }
            vec![("nu_zero".into(), off), ("nu_positive".into(), on)]
        }
        AblationName::Onboard => vec![
            ("linear_relative".into(), ScenarioConfig { measurement: MeasurementModel::Relative, ..linear }),
            ("nonlinear_relative".into(), ScenarioConfig { measurement: MeasurementModel::Relative, ..nonlinear }),
        ],
        AblationName::Nonlinear => vec![
            ("nonlinear_pos".into(), ScenarioConfig { measurement: MeasurementModel::Position, ..nonlinear.clone() }),
            ("nonlinear_relative".into(), ScenarioConfig { measurement: MeasurementModel::Relative, ..nonlinear }),
        ],
    }
}

fn row(label: &str, o: &ScenarioOutcome) -> AblationRow {
    let trace = &o.convergence.objective_trace;
    AblationRow {
        label: label.into(),
        seed: o.config.seed,
        metrics: o.metrics.clone(),
        strictly_decreasing: trace.windows(2).all(|w| w[1] < w[0]),
        objective_initial: trace[0],
        objective_final: *trace.last().expect("non-empty trace"),
    }
}

fn check(description: impl Into<String>, pass: bool) -> AblationCheck {
    AblationCheck {
        description: description.into(),
        pass,
    }
}

fn checks(name: AblationName, rows: &[AblationRow]) -> Vec<AblationCheck> {
    let get = |label: &str| &rows.iter().find(|r| r.label == label).expect("row exists").metrics;
    let mut out = vec![check(
        "objective strictly decreases on every run",
        rows.iter().all(|r| r.strictly_decreasing),
    )];
    out.push(check(
        "search directions stay bounded (max ||d|| < 1e6)",
        rows.iter().all(|r| r.metrics.max_direction_norm < 1e6),
    ));
    match name {
        AblationName::StudentsT => {
            for seed in STUDENTS_T_SEEDS {
                let st = get(&format!("student_t_seed{seed}")).impact_window_foot_velocity_rmse;
                let ga = get(&format!("gaussian_seed{seed}")).impact_window_foot_velocity_rmse;
                let pass = matches!((st, ga), (Some(s), Some(g)) if s < g);
                out.push(check(
                    format!("seed {seed}: impact-window foot-velocity RMSE student_t {st:?} < gaussian {ga:?}"),
                    pass,
                ));
            }
        }
        AblationName::GaussNewton => {
            let gn = get("gauss_newton");
            let sd = get("steepest_descent");
            out.push(check(
                format!("gauss_newton reaches the stopping rule ({:?})", gn.stop_reason),
                gn.stop_reason == StopReason::Converged,
            ));
            // A capped steepest-descent run reports its cap, a lower bound.
            let (g, s) = (gn.iterations, sd.iterations);
            out.push(check(
                format!("gauss_newton iterations {g} <= steepest_descent iterations {s} / 5"),
                gn.stop_reason == StopReason::Converged && 5 * g <= s,
            ));
        }
        AblationName::Smoothing => {
            let off = get("nu_zero");
            let on = get("nu_positive");
            out.push(check(
                format!("switches nu>0 {} <= nu=0 {}", on.switches_estimate, off.switches_estimate),
                on.switches_estimate <= off.switches_estimate,
            ));
            out.push(check(
                format!("accuracy nu>0 {:.4} >= nu=0 {:.4}", on.accuracy, off.accuracy),
                on.accuracy >= off.accuracy,
            ));
            out.push(check(format!("accuracy nu>0 {:.4} >= 0.90", on.accuracy), on.accuracy >= 0.90));
        }
        AblationName::Onboard | AblationName::Nonlinear => {
            for r in rows.iter().filter(|r| r.label.ends_with("relative")) {
                out.push(check(
                    format!("{}: accuracy {:.4} >= 0.85", r.label, r.metrics.accuracy),
                    r.metrics.accuracy >= 0.85,
                ));
            }
        }
    }
    out
}

/// Runs the paired configurations of an ablation concurrently, starting
/// from `base`, and writes `ablation.json`/`ablation.csv` (plus one run
/// directory per configuration) under `out` when given.
pub fn run_ablation(name: AblationName, base: &ScenarioConfig, out: Option<&Path>) -> Result<AblationTable> {
    let mut jobs = jobs(name, base);
    if let Some(dir) = out {
        for (label, cfg) in &mut jobs {
            cfg.output_dir = Some(dir.join(label.as_str()));
        }
    }
    let outcomes: Vec<Result<ScenarioOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|(_, cfg)| s.spawn(move || run_scenario(cfg))).collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(jobs.len());
    for ((label, _), outcome) in jobs.iter().zip(outcomes) {
        rows.push(row(label, &outcome?));
    }
    let table = AblationTable {
        name,
        checks: checks(name, &rows),
        rows,
    };
    if let Some(dir) = out {
        table.write(dir)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in AblationName::ALL {
            assert_eq!(a.as_str().parse::<AblationName>().unwrap(), a);
        }
        assert!("bogus".parse::<AblationName>().is_err());
    }

    #[test]
    fn pairs_differ_only_in_the_ablated_knob() {
        let base = ScenarioConfig::default();
        let j = jobs(AblationName::Smoothing, &base);
        assert_eq!(j[0].1.estimator.nu, 0.0);
        assert!(j[1].1.estimator.nu > 0.0);
        let mut a = j[0].1.clone();
        a.estimator.nu = j[1].1.estimator.nu;
        assert_eq!(a, j[1].1);

        let j = jobs(AblationName::StudentsT, &base);
        assert_eq!(j.len(), 10);
        assert!(j.iter().all(|(_, c)| c.known_modes));
    }
}

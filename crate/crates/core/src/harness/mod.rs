//! Experiment orchestration: simulate a hopper, estimate its trajectory and
//! modes, score the result and write artifacts.

mod ablation;
mod config;
pub mod io;
pub mod metrics;

pub use ablation::{run_ablation, AblationCheck, AblationName, AblationRow, AblationTable};
pub use config::{InitStrategy, ScenarioConfig};
pub use metrics::RunMetrics;

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::Result;
use crate::gauss_newton::{estimate, ConvergenceReport, EstimateOptions};
use crate::model::{EstimationProblem, EstimatorSettings, ModeWeights, ProcessPenalty, SwitchedSystem, TrajectoryEstimate};
use crate::oscillators::{hopper, simulate, HopperParams, HopperSystem, MeasurementModel, SimRecord, SimulationSettings};

use io::{RunReport, TrajectoryRow};

/// Everything produced by one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub record: SimRecord,
    pub estimate: TrajectoryEstimate,
    pub convergence: ConvergenceReport,
    pub metrics: RunMetrics,
    pub mode_names: Vec<String>,
}

impl ScenarioOutcome {
    pub fn report(&self) -> RunReport {
        RunReport {
            metrics: self.metrics.clone(),
            convergence: self.convergence.clone(),
            config: self.config.clone(),
            seed: self.config.seed,
            impacts: self.record.impacts.clone(),
            mode_names: self.mode_names.clone(),
        }
    }

    pub fn trajectory_rows(&self) -> Vec<TrajectoryRow> {
        let dt = self.config.dt;
        let est_modes = self.estimate.modes();
        (0..self.record.modes.len())
            .map(|t| {
                let xt = &self.record.x[t];
                let xe = &self.estimate.x[t];
                TrajectoryRow {
                    t,
                    time: t as f64 * dt,
                    x_true: [xt[0], xt[1], xt[2], xt[3]],
                    mode_true: self.record.modes[t],
                    y: [self.record.y[t][0], self.record.y[t][1]],
                    x_est: [xe[0], xe[1], xe[2], xe[3]],
                    mode_est: est_modes[t],
                    w_tilde: self.estimate.w_relaxed.row(t).to_vec(),
                }
            })
            .collect()
    }

    /// Writes `trajectory.csv`, `convergence.csv`, `report.json` and `config.json`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let modes = self.estimate.w_relaxed.modes();
        std::fs::write(dir.join("trajectory.csv"), io::trajectory_csv(&self.trajectory_rows(), modes))?;
        std::fs::write(dir.join("convergence.csv"), io::convergence_csv(&self.convergence))?;
        io::write_json(&dir.join("report.json"), &self.report())?;
        io::write_json(&dir.join("config.json"), &self.config)?;
        Ok(())
    }
}

/// Simulates the configured hopper.
pub fn simulate_scenario(config: &ScenarioConfig) -> Result<(SimRecord, HopperSystem)> {
    config.validate()?;
    let (automaton, system) = hopper(config.model, config.hopper_params(), config.measurement);
    let settings = SimulationSettings {
        x_init: config.x_init,
        mode_init: config.mode_index()?,
        horizon: config.horizon,
        measurement: config.measurement,
        meas_noise_std: config.meas_noise_std,
        process_noise_std: config.process_noise_std,
        seed: config.seed,
    };
    Ok((simulate(&automaton, &settings)?, system))
}

/// Initial trajectory for the estimator.
///
/// With position measurements the positions are read off `y` and the
/// velocities are central differences. With relative measurements the foot
/// is placed on the ground, so `q1 = y1` and `q̇1 = y2`.
pub fn initial_trajectory(
    strategy: InitStrategy,
    measurement: MeasurementModel,
    y: &[DVector<f64>],
    dt: f64,
    truth: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let len = y.len() + 1;
    match strategy {
        InitStrategy::Zeros => vec![DVector::zeros(4); len],
        InitStrategy::Truth => truth.to_vec(),
        InitStrategy::FromMeasurements | InitStrategy::GaussianSmoother => {
            let at = |t: usize| &y[t.min(y.len() - 1)];
            (0..len)
                .map(|t| match measurement {
                    MeasurementModel::Position => {
                        let (lo, hi) = (t.saturating_sub(1), (t + 1).min(y.len() - 1));
                        let span = (hi.max(lo) - lo).max(1) as f64 * dt;
                        let v = if dt > 0.0 { (at(hi) - at(lo)) / span } else { DVector::zeros(2) };
                        DVector::from_vec(vec![at(t)[0], at(t)[1], v[0], v[1]])
                    }
                    MeasurementModel::Relative => DVector::from_vec(vec![at(t)[0], 0.0, at(t)[1], 0.0]),
                })
                .collect()
        }
    }
}

/// Fraction of the spring's extension limit that initial trajectories may use.
const INIT_EXTENSION_MARGIN: f64 = 0.98;

/// Moves the foot position so that `|q1 − q2|` stays inside the springs'
/// domain.
pub fn clamp_to_spring_domain(x: &mut [DVector<f64>], params: &HopperParams) {
    let Some(limit) = params.max_extension() else { return };
    let bound = INIT_EXTENSION_MARGIN * limit;
    for xt in x {
        let ell = xt[0] - xt[1];
        if ell.abs() > bound {
            xt[1] = xt[0] - bound.copysign(ell);
        }
    }
}

/// Builds the estimation problem for a simulated record.
pub fn build_problem(config: &ScenarioConfig, system: HopperSystem, record: &SimRecord) -> Result<EstimationProblem> {
    let system: Arc<dyn SwitchedSystem> = Arc::new(system);
    EstimationProblem::new(system, record.y.clone(), config.q_matrix()?, config.r_matrix()?, config.estimator)
}

/// Minimizes the objective with Gaussian process penalties and fixed
/// weights `w` (uniform when `None`), starting from `x0`.
pub fn gaussian_smoother(
    problem: &EstimationProblem,
    x0: &[DVector<f64>],
    w: Option<&ModeWeights>,
) -> Result<Vec<DVector<f64>>> {
    let settings = EstimatorSettings {
        penalty: ProcessPenalty::Gaussian,
        ..*problem.settings()
    };
    let smoothing = problem.with_settings(settings)?;
    let options = EstimateOptions {
        fixed_weights: Some(w.cloned().unwrap_or_else(|| ModeWeights::uniform(problem.horizon(), problem.num_modes()))),
        ..Default::default()
    };
    let (est, report) = estimate(&smoothing, x0, None, &options)?;
    log::info!("gaussian smoother: {} iterations, {:?}", report.iterations, report.stop_reason);
    Ok(est.x)
}

/// Simulates, estimates and scores one scenario. Artifacts are written when
/// `config.output_dir` is set.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let (record, system) = simulate_scenario(config)?;
    let mode_names: Vec<String> = (0..system.num_modes()).map(|m| system.mode_name(m)).collect();
    let problem = build_problem(config, system, &record)?;
    let mut x0 = initial_trajectory(config.init, config.measurement, &record.y, config.dt, &record.x);
    clamp_to_spring_domain(&mut x0, &config.hopper_params());
    let known = config
        .known_modes
        .then(|| ModeWeights::from_modes(&record.modes, problem.num_modes()));
    if config.init == InitStrategy::GaussianSmoother {
        x0 = gaussian_smoother(&problem, &x0, known.as_ref())?;
    }
    let options = EstimateOptions {
        direction: config.direction,
        fixed_weights: known,
        track_curvature: false,
    };
    let (est, convergence) = estimate(&problem, &x0, None, &options)?;
    let metrics = metrics::compute(&metrics::MetricInputs {
        x_est: &est.x,
        x_true: &record.x,
        modes_est: &est.modes(),
        modes_true: &record.modes,
        impacts: &record.impacts,
        observable: config.measurement == MeasurementModel::Position,
        report: &convergence,
    });
    let outcome = ScenarioOutcome {
        config: config.clone(),
        record,
        estimate: est,
        convergence,
        metrics,
        mode_names,
    };
    if let Some(dir) = &config.output_dir {
        outcome.write_artifacts(dir)?;
    }
    Ok(outcome)
}

/// Simulation-only artifact: `trajectory.csv` with the estimate columns
/// holding the truth and one-hot weights.
pub fn simulation_csv(config: &ScenarioConfig, record: &SimRecord, modes: usize) -> String {
    let rows: Vec<TrajectoryRow> = (0..record.modes.len())
        .map(|t| {
            let x = &record.x[t];
            let xa = [x[0], x[1], x[2], x[3]];
            let mut w = vec![0.0; modes];
            w[record.modes[t]] = 1.0;
            TrajectoryRow {
                t,
                time: t as f64 * config.dt,
                x_true: xa,
                mode_true: record.modes[t],
                y: [record.y[t][0], record.y[t][1]],
                x_est: xa,
                mode_est: record.modes[t],
                w_tilde: w,
            }
        })
        .collect();
    io::trajectory_csv(&rows, modes)
}

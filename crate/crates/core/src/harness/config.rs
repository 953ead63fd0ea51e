use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss_newton::DirectionMode;
use crate::model::EstimatorSettings;
use crate::oscillators::{HopperParams, MeasurementModel, ModelKind, LINEAR_MODES, NONLINEAR_MODES};

/// How the estimator's initial trajectory is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Read positions off the measurements and difference them for velocities.
    FromMeasurements,
    /// `FromMeasurements`, then refined by the Gaussian-penalty smoother with
    /// uniform fixed weights.
    #[default]
    GaussianSmoother,
    Zeros,
    /// Start at the simulated ground truth.
    Truth,
}

/// One simulate-then-estimate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub model: ModelKind,
    pub measurement: MeasurementModel,
    pub meas_noise_std: f64,
    pub process_noise_std: f64,
    /// Number of measurements `T`.
    pub horizon: usize,
    /// Euler step; overrides `hopper.dt`.
    pub dt: f64,
    pub x_init: [f64; 4],
    /// Mode name, e.g. `"A_down"` or `"A"`.
    pub mode_init: String,
    /// Masses, gravity and spring laws; `None` uses the model's defaults.
    pub hopper: Option<HopperParams>,
    /// Process covariance `Q` (row-major rows).
    pub q: Vec<Vec<f64>>,
    /// Measurement covariance `R` (row-major rows).
    pub r: Vec<Vec<f64>>,
    pub estimator: EstimatorSettings,
    pub direction: DirectionMode,
    /// Hold the mode weights at the simulated truth.
    pub known_modes: bool,
    pub init: InitStrategy,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Linear,
            measurement: MeasurementModel::Position,
            meas_noise_std: 0.01,
            process_noise_std: 0.0,
            horizon: 2000,
            dt: 0.01,
            x_init: [1.0, 0.5, 0.0, 0.0],
            mode_init: "A_down".into(),
            hopper: None,
            q: diagonal(&[1e-6, 1e-6, 1e-2, 1e-2]),
            r: diagonal(&[1e-2, 1e-2]),
            estimator: EstimatorSettings::default(),
            direction: DirectionMode::GaussNewton,
            known_modes: false,
            init: InitStrategy::GaussianSmoother,
            seed: 7,
            output_dir: None,
        }
    }
}

fn diagonal(d: &[f64]) -> Vec<Vec<f64>> {
    (0..d.len()).map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be {n}×{n}")));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
}

impl ScenarioConfig {
    /// A config for the given model with its default initial mode.
    pub fn for_model(model: ModelKind) -> Self {
        let mode_init = match model {
            ModelKind::Linear => "A_down",
            ModelKind::Nonlinear => "A",
        };
        Self {
            model,
            mode_init: mode_init.into(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hopper parameters with `dt` applied.
    pub fn hopper_params(&self) -> HopperParams {
        let base = self.hopper.unwrap_or_else(|| match self.model {
            ModelKind::Linear => HopperParams::linear(),
            ModelKind::Nonlinear => HopperParams::nonlinear(),
        });
        HopperParams { dt: self.dt, ..base }
    }

    pub fn mode_index(&self) -> Result<usize> {
        let modes: &[_] = match self.model {
            ModelKind::Linear => &LINEAR_MODES,
            ModelKind::Nonlinear => &NONLINEAR_MODES,
        };
        modes.iter().position(|m| m.name == self.mode_init).ok_or_else(|| {
            let names: Vec<_> = modes.iter().map(|m| m.name).collect();
            Error::Config(format!("unknown mode_init {:?}; expected one of {names:?}", self.mode_init))
        })
    }

    pub fn q_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.q, 4, "q")
    }

    pub fn r_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.r, 2, "r")
    }

    pub fn validate(&self) -> Result<()> {
        self.mode_index()?;
        self.q_matrix()?;
        self.r_matrix()?;
        self.hopper_params().validate()?;
        if self.horizon < 2 {
            return Err(Error::BadHyperparameter(format!("horizon must be at least 2, got {}", self.horizon)));
        }
        Ok(())
    }
}

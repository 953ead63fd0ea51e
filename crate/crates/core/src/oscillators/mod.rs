//! Double-mass hopper benchmarks: a piecewise-linear four-mode model and a
//! two-mode model with a stiffening pantograph spring.
//!
//! State ordering is `x = (q1, q2, q̇1, q̇2)` with `q1` the hip height and
//! `q2` the foot height.

mod sim;

pub use sim::{simulate, Guard, HybridAutomaton, Predicate, SimRecord, SimulationSettings};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SwitchedSystem;

/// Spring force `k(ℓ)` as a function of leg length `ℓ = q1 − q2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpringLaw {
    /// `k = stiffness·ℓ − offset`
    Linear { stiffness: f64, offset: f64 },
    /// `k = a·(ℓ − rest_length) / √(c² − ℓ²)`, finite for `|ℓ| < c`.
    Pantograph { a: f64, rest_length: f64, c: f64 },
}

impl SpringLaw {
    pub fn force(&self, ell: f64) -> f64 {
        match *self {
            Self::Linear { stiffness, offset } => stiffness * ell - offset,
            Self::Pantograph { a, rest_length, c } => a * (ell - rest_length) / (c * c - ell * ell).sqrt(),
        }
    }

    /// Bound on `|ℓ|` outside which the force is undefined.
    pub fn max_extension(&self) -> Option<f64> {
        match *self {
            Self::Linear { .. } => None,
            Self::Pantograph { c, .. } => Some(c.abs()),
        }
    }

    pub fn derivative(&self, ell: f64) -> f64 {
        match *self {
            Self::Linear { stiffness, .. } => stiffness,
            Self::Pantograph { a, rest_length, c } => {
                let s = c * c - ell * ell;
                a / s.sqrt() + a * (ell - rest_length) * ell / (s * s.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopperParams {
    pub m_h: f64,
    pub m_t: f64,
    pub g: f64,
    pub dt: f64,
    /// Spring used while the hip moves down.
    pub k1: SpringLaw,
    /// Spring used while the hip moves up.
    pub k2: SpringLaw,
}

impl HopperParams {
    pub fn linear() -> Self {
        Self {
            m_h: 3.0,
            m_t: 1.0,
            g: 2.0,
            dt: 0.01,
            k1: SpringLaw::Linear { stiffness: 10.0, offset: 3.0 },
            k2: SpringLaw::Linear { stiffness: 15.0, offset: 3.0 },
        }
    }

    pub fn nonlinear() -> Self {
        let spring = SpringLaw::Pantograph { a: 10.0, rest_length: 0.3, c: 1.0 };
        Self {
            k1: spring,
            k2: spring,
            ..Self::linear()
        }
    }

    /// Smallest `max_extension` of the two springs.
    pub fn max_extension(&self) -> Option<f64> {
        match (self.k1.max_extension(), self.k2.max_extension()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("m_h", self.m_h), ("m_t", self.m_t), ("g", self.g)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::BadHyperparameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.dt >= 0.0 && self.dt.is_finite()) {
            return Err(Error::BadHyperparameter(format!("dt must be non-negative, got {}", self.dt)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contact {
    Air,
    Ground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HipDirection {
    Down,
    Up,
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpringChoice {
    K1,
    K2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpec {
    pub name: &'static str,
    pub contact: Contact,
    pub direction: HipDirection,
    pub spring: SpringChoice,
}

pub const LINEAR_MODES: [ModeSpec; 4] = [
    ModeSpec { name: "A_down", contact: Contact::Air, direction: HipDirection::Down, spring: SpringChoice::K1 },
    ModeSpec { name: "G_down", contact: Contact::Ground, direction: HipDirection::Down, spring: SpringChoice::K1 },
    ModeSpec { name: "G_up", contact: Contact::Ground, direction: HipDirection::Up, spring: SpringChoice::K2 },
    ModeSpec { name: "A_up", contact: Contact::Air, direction: HipDirection::Up, spring: SpringChoice::K2 },
];

pub const NONLINEAR_MODES: [ModeSpec; 2] = [
    ModeSpec { name: "A", contact: Contact::Air, direction: HipDirection::Either, spring: SpringChoice::K1 },
    ModeSpec { name: "G", contact: Contact::Ground, direction: HipDirection::Either, spring: SpringChoice::K1 },
];

pub mod mode {
    pub const A_DOWN: usize = 0;
    pub const G_DOWN: usize = 1;
    pub const G_UP: usize = 2;
    pub const A_UP: usize = 3;
    pub const AIR: usize = 0;
    pub const GROUND: usize = 1;
}

impl ModeSpec {
    fn spring<'a>(&self, params: &'a HopperParams) -> &'a SpringLaw {
        match self.spring {
            SpringChoice::K1 => &params.k1,
            SpringChoice::K2 => &params.k2,
        }
    }

    /// Foot acceleration if the ground constraint were released.
    pub fn free_foot_acceleration(&self, q: [f64; 2], params: &HopperParams) -> f64 {
        self.spring(params).force(q[0] - q[1]) / params.m_t - params.g
    }

    pub fn acceleration(&self, q: [f64; 2], params: &HopperParams) -> [f64; 2] {
        let k = self.spring(params).force(q[0] - q[1]);
        let hip = -k / params.m_h - params.g;
        let foot = match self.contact {
            Contact::Air => k / params.m_t - params.g,
            Contact::Ground => 0.0,
        };
        [hip, foot]
    }

    /// `∂q̈/∂q` as a 2×2 row-major array.
    fn acceleration_jacobian(&self, q: [f64; 2], params: &HopperParams) -> [[f64; 2]; 2] {
        let dk = self.spring(params).derivative(q[0] - q[1]);
        let hip = [-dk / params.m_h, dk / params.m_h];
        let foot = match self.contact {
            Contact::Air => [dk / params.m_t, -dk / params.m_t],
            Contact::Ground => [0.0, 0.0],
        };
        [hip, foot]
    }

    /// Domain membership with tolerance `tol` on the ground equality constraints.
    pub fn contains(&self, x: &[f64; 4], tol: f64) -> bool {
        let contact_ok = match self.contact {
            Contact::Air => x[1] >= -tol,
            Contact::Ground => x[1].abs() <= tol && x[3].abs() <= tol,
        };
        let dir_ok = match self.direction {
            HipDirection::Down => x[2] <= 0.0,
            HipDirection::Up => x[2] >= 0.0,
            HipDirection::Either => true,
        };
        contact_ok && dir_ok
    }
}

/// One forward-Euler step of mode `spec`:
/// `q⁺ = q + dt·q̇`, `q̇⁺ = q̇ + dt·q̈(q)`.
pub fn step_mode(spec: &ModeSpec, q: [f64; 2], qd: [f64; 2], params: &HopperParams) -> Result<([f64; 2], [f64; 2])> {
    if q.iter().chain(&qd).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState(0));
    }
    let a = spec.acceleration(q, params);
    let dt = params.dt;
    let qn = [q[0] + dt * qd[0], q[1] + dt * qd[1]];
    let qdn = [qd[0] + dt * a[0], qd[1] + dt * a[1]];
    if qn.iter().chain(&qdn).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState(0));
    }
    Ok((qn, qdn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MeasurementModel {
    /// `(q1, q2)`
    #[default]
    #[serde(rename = "pos")]
    Position,
    /// `(q1 − q2, q̇1 − q̇2)`
    #[serde(rename = "relative")]
    Relative,
}

impl MeasurementModel {
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            Self::Position => DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            Self::Relative => DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Position => measurement_pos(x),
            Self::Relative => measurement_relative(x),
        }
    }
}

pub fn measurement_pos(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[0], x[1]])
}

pub fn measurement_relative(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[0] - x[1], x[2] - x[3]])
}

/// The per-mode Euler maps of a hopper, exposed to the estimator.
#[derive(Debug, Clone)]
pub struct HopperSystem {
    params: HopperParams,
    modes: Vec<ModeSpec>,
    measurement: MeasurementModel,
}

impl HopperSystem {
    pub fn new(params: HopperParams, modes: Vec<ModeSpec>, measurement: MeasurementModel) -> Self {
        Self {
            params,
            modes,
            measurement,
        }
    }

    pub fn params(&self) -> &HopperParams {
        &self.params
    }

    pub fn modes(&self) -> &[ModeSpec] {
        &self.modes
    }

    pub fn measurement(&self) -> MeasurementModel {
        self.measurement
    }
}

impl SwitchedSystem for HopperSystem {
    fn state_dim(&self) -> usize {
        4
    }

    fn measurement_dim(&self) -> usize {
        2
    }

    fn num_modes(&self) -> usize {
        self.modes.len()
    }

    fn process(&self, m: usize, x: &DVector<f64>) -> DVector<f64> {
        let spec = &self.modes[m];
        let dt = self.params.dt;
        let a = spec.acceleration([x[0], x[1]], &self.params);
        DVector::from_vec(vec![x[0] + dt * x[2], x[1] + dt * x[3], x[2] + dt * a[0], x[3] + dt * a[1]])
    }

    fn process_jacobian(&self, m: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let dt = self.params.dt;
        let da = self.modes[m].acceleration_jacobian([x[0], x[1]], &self.params);
        let mut j = DMatrix::identity(4, 4);
        j[(0, 2)] = dt;
        j[(1, 3)] = dt;
        for r in 0..2 {
            for c in 0..2 {
                j[(2 + r, c)] = dt * da[r][c];
            }
        }
        j
    }

    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        self.measurement.apply(x)
    }

    fn measurement_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.measurement.matrix()
    }

    fn mode_name(&self, m: usize) -> String {
        self.modes[m].name.to_string()
    }
}

pub fn linear_hopper(params: HopperParams, measurement: MeasurementModel) -> (HybridAutomaton, HopperSystem) {
    (
        HybridAutomaton::linear(params),
        HopperSystem::new(params, LINEAR_MODES.to_vec(), measurement),
    )
}

pub fn nonlinear_hopper(params: HopperParams, measurement: MeasurementModel) -> (HybridAutomaton, HopperSystem) {
    (
        HybridAutomaton::nonlinear(params),
        HopperSystem::new(params, NONLINEAR_MODES.to_vec(), measurement),
    )
}

pub fn hopper(kind: ModelKind, params: HopperParams, measurement: MeasurementModel) -> (HybridAutomaton, HopperSystem) {
    match kind {
        ModelKind::Linear => linear_hopper(params, measurement),
        ModelKind::Nonlinear => nonlinear_hopper(params, measurement),
    }
}

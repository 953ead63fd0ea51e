//! Switched-system abstraction, covariances and the validated estimation problem.
//!
//! A switched system advances its continuous state with one of `M` process
//! maps per step,
//!
//! ```text
//! x[t+1] = Σ_m w[t][m] F_m(x[t]) + noise,     y[t] = H(x[t]) + noise,
//! ```
//!
//! where `w[t]` is a one-hot mode selector. Estimation relaxes `w[t]` onto the
//! probability simplex.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CovarianceRole, Error, Result};

/// Discrete-time switched system with a time-invariant measurement map.
pub trait SwitchedSystem: Send + Sync {
    fn state_dim(&self) -> usize;

    fn measurement_dim(&self) -> usize;

    fn num_modes(&self) -> usize;

    /// Process map `F_m(x)`.
    fn process(&self, mode: usize, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of [`SwitchedSystem::process`] with respect to `x`.
    fn process_jacobian(&self, mode: usize, x: &DVector<f64>) -> DMatrix<f64>;

    /// Measurement map `H(x)`.
    fn measure(&self, x: &DVector<f64>) -> DVector<f64>;

    fn measurement_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn mode_name(&self, mode: usize) -> String {
        format!("m{}", mode + 1)
    }
}

/// SPD covariance with a cached inverse square root `W` (`WᵀW = C⁻¹`).
#[derive(Clone)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    inverse: DMatrix<f64>,
    diagonal: bool,
}

impl Covariance {
    pub fn new(matrix: DMatrix<f64>, role: CovarianceRole) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: format!("{role} (must be square)"),
                expected: n,
                actual: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonPositiveDefinite(role));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NonPositiveDefinite(role));
        }

        let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || matrix[(i, j)] == 0.0));
        let inv_sqrt = if diagonal {
            let mut w = DMatrix::zeros(n, n);
            for i in 0..n {
                let v = matrix[(i, i)];
                if v <= 0.0 {
                    return Err(Error::NonPositiveDefinite(role));
                }
                w[(i, i)] = 1.0 / v.sqrt();
            }
            w
        } else {
            let chol = matrix
                .clone()
                .cholesky()
                .ok_or(Error::NonPositiveDefinite(role))?;
            chol.l()
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .ok_or(Error::NonPositiveDefinite(role))?
        };
        let inverse = inv_sqrt.transpose() * &inv_sqrt;
        Ok(Self {
            matrix,
            inv_sqrt,
            inverse,
            diagonal,
        })
    }

    pub fn identity_scaled(n: usize, variance: f64, role: CovarianceRole) -> Result<Self> {
        Self::new(DMatrix::identity(n, n) * variance, role)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// `‖C^{-1/2} v‖²`
    pub fn mahalanobis_sq(&self, v: &DVector<f64>) -> f64 {
        if self.diagonal {
            v.iter()
                .enumerate()
                .map(|(i, x)| {
                    let s = x * self.inv_sqrt[(i, i)];
                    s * s
                })
                .sum()
        } else {
            (&self.inv_sqrt * v).norm_squared()
        }
    }

    /// `C⁻¹ v`
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.diagonal {
            DVector::from_iterator(
                v.len(),
                v.iter().enumerate().map(|(i, x)| x * self.inverse[(i, i)]),
            )
        } else {
            &self.inverse * v
        }
    }
}

impl fmt::Debug for Covariance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Covariance")
            .field("matrix", &self.matrix)
            .field("diagonal", &self.diagonal)
            .finish()
    }
}

/// Process-noise penalty on `e = x[t+1] − F_m(x[t])`, written in terms of
/// `z = ‖Q^{-1/2} e‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessPenalty {
    /// `r·log(r + z) − r·log(r)`
    StudentT { dof: f64 },
    /// `z / 2`
    Gaussian,
}

impl ProcessPenalty {
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            ProcessPenalty::StudentT { dof } => dof * (z / dof).ln_1p(),
            ProcessPenalty::Gaussian => 0.5 * z,
        }
    }

    /// Scalar `κ(z)` such that the gradient in `e` is `κ(z)·Q⁻¹e`.
    pub fn gradient_scale(&self, z: f64) -> f64 {
        match *self {
            ProcessPenalty::StudentT { dof } => 2.0 * dof / (dof + z),
            ProcessPenalty::Gaussian => 1.0,
        }
    }

    /// Scalar weight of `Q⁻¹` in the Gauss-Newton curvature blocks. It equals
    /// `gradient_scale`, so a single residual's Gauss-Newton step sends it to
    /// zero.
    pub fn curvature_scale(&self, z: f64) -> f64 {
        match *self {
            ProcessPenalty::StudentT { dof } => 2.0 * dof / (dof + z),
            ProcessPenalty::Gaussian => 1.0,
        }
    }
}

impl Default for ProcessPenalty {
    fn default() -> Self {
        ProcessPenalty::StudentT { dof: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSearchSettings {
    /// Backtracking factor `γ ∈ (0, 1)`.
    pub gamma: f64,
    /// Sufficient-decrease constant `c ∈ (0, 1)`.
    pub c: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchSettings {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            c: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerSettings {
    pub max_iters: usize,
    /// Tolerance on the ∞-norm of the projected-gradient residual.
    pub tol: f64,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-9,
        }
    }
}

/// Estimator hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub penalty: ProcessPenalty,
    /// Weight `ν` of the `‖w[t+1] − w[t]‖²` smoothing term.
    pub nu: f64,
    /// Weight `β` of the `(β/2)‖w‖²` Moreau term.
    pub beta: f64,
    /// Stop once the predicted decrease satisfies `−Δ ≤ ε`.
    pub epsilon: f64,
    pub line_search: LineSearchSettings,
    pub inner: InnerSettings,
    pub outer_max_iters: usize,
    /// Ridge `μ` added to the curvature (`U + μI` stays PSD and continuous in x).
    pub damping: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            penalty: ProcessPenalty::default(),
            nu: 0.3,
            beta: 1e-4,
            epsilon: 1e-6,
            line_search: LineSearchSettings::default(),
            inner: InnerSettings::default(),
            outer_max_iters: 200,
            damping: 1e-8,
        }
    }
}

/// A validated estimation problem. Immutable after construction.
#[derive(Clone)]
pub struct EstimationProblem {
    system: Arc<dyn SwitchedSystem>,
    measurements: Vec<DVector<f64>>,
    q: Covariance,
    r: Covariance,
    settings: EstimatorSettings,
}

impl EstimationProblem {
    /// Validates shapes and hyperparameters and caches `Q^{-1/2}`, `R^{-1/2}`.
    pub fn new(
        system: Arc<dyn SwitchedSystem>,
        measurements: Vec<DVector<f64>>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        settings: EstimatorSettings,
    ) -> Result<Self> {
        let n = system.state_dim();
        let d = system.measurement_dim();
        let m = system.num_modes();
        if n == 0 || d == 0 || m == 0 {
            return Err(Error::BadHyperparameter(format!(
                "system dimensions must be positive (n = {n}, d = {d}, M = {m})"
            )));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "process covariance Q".into(),
                expected: n,
                actual: q.nrows(),
            });
        }
        if r.nrows() != d || r.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "measurement covariance R".into(),
                expected: d,
                actual: r.nrows(),
            });
        }
        let q = Covariance::new(q, CovarianceRole::Process)?;
        let r = Covariance::new(r, CovarianceRole::Measurement)?;

        if measurements.len() < 2 {
            return Err(Error::BadHyperparameter(format!(
                "need at least 2 measurements, got {}",
                measurements.len()
            )));
        }
        for (t, y) in measurements.iter().enumerate() {
            if y.len() != d {
                return Err(Error::DimensionMismatch {
                    what: format!("measurement y[{t}]"),
                    expected: d,
                    actual: y.len(),
                });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BadHyperparameter(format!(
                    "measurement y[{t}] is not finite"
                )));
            }
        }
        validate_settings(&settings)?;

        Ok(Self {
            system,
            measurements,
            q,
            r,
            settings,
        })
    }

    /// Same data, different hyperparameters.
    pub fn with_settings(&self, settings: EstimatorSettings) -> Result<Self> {
        validate_settings(&settings)?;
        Ok(Self {
            settings,
            ..self.clone()
        })
    }

    pub fn system(&self) -> &dyn SwitchedSystem {
        self.system.as_ref()
    }

    pub fn system_arc(&self) -> Arc<dyn SwitchedSystem> {
        Arc::clone(&self.system)
    }

    pub fn measurements(&self) -> &[DVector<f64>] {
        &self.measurements
    }

    /// Number of measurements `T`; the trajectory has `T + 1` states.
    pub fn horizon(&self) -> usize {
        self.measurements.len()
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn num_modes(&self) -> usize {
        self.system.num_modes()
    }

    pub fn q(&self) -> &Covariance {
        &self.q
    }

    pub fn r(&self) -> &Covariance {
        &self.r
    }

    pub fn settings(&self) -> &EstimatorSettings {
        &self.settings
    }
}

impl fmt::Debug for EstimationProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimationProblem")
            .field("n", &self.state_dim())
            .field("M", &self.num_modes())
            .field("T", &self.horizon())
            .field("settings", &self.settings)
            .finish()
    }
}

fn validate_settings(s: &EstimatorSettings) -> Result<()> {
    let bad = |msg: String| Err(Error::BadHyperparameter(msg));
    if let ProcessPenalty::StudentT { dof } = s.penalty {
        if !(dof > 0.0 && dof.is_finite()) {
            return bad(format!("degrees of freedom r must be > 0, got {dof}"));
        }
    }
    if !(s.beta > 0.0 && s.beta.is_finite()) {
        return bad(format!("beta must be > 0, got {}", s.beta));
    }
    if !(s.epsilon > 0.0) {
        return bad(format!("epsilon must be > 0, got {}", s.epsilon));
    }
    if !(s.nu >= 0.0 && s.nu.is_finite()) {
        return bad(format!("nu must be >= 0, got {}", s.nu));
    }
    let ls = &s.line_search;
    if !(ls.gamma > 0.0 && ls.gamma < 1.0) {
        return bad(format!("line-search gamma must be in (0, 1), got {}", ls.gamma));
    }
    if !(ls.c > 0.0 && ls.c < 1.0) {
        return bad(format!("line-search c must be in (0, 1), got {}", ls.c));
    }
    if !(s.inner.tol > 0.0) || s.inner.max_iters == 0 {
        return bad("inner solver needs tol > 0 and max_iters > 0".into());
    }
    if !(s.damping >= 0.0 && s.damping.is_finite()) {
        return bad(format!("damping must be >= 0, got {}", s.damping));
    }
    Ok(())
}

/// Relaxed mode weights `w[t] ∈ Δ^M` for `t = 0..T`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeWeights {
    horizon: usize,
    modes: usize,
    data: Vec<f64>,
}

impl ModeWeights {
    pub fn uniform(horizon: usize, modes: usize) -> Self {
        Self {
            horizon,
            modes,
            data: vec![1.0 / modes as f64; horizon * modes],
        }
    }

    pub fn from_modes(modes_seq: &[usize], modes: usize) -> Self {
        let mut data = vec![0.0; modes_seq.len() * modes];
        for (t, &m) in modes_seq.iter().enumerate() {
            data[t * modes + m] = 1.0;
        }
        Self {
            horizon: modes_seq.len(),
            modes,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let modes = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == modes), "ragged weight rows");
        Self {
            horizon: rows.len(),
            modes,
            data: rows.concat(),
        }
    }

    pub(crate) fn from_raw(horizon: usize, modes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), horizon * modes);
        Self {
            horizon,
            modes,
            data,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.modes..(t + 1) * self.modes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.modes)
    }

    /// First `t` whose row leaves the simplex by more than `tol`.
    pub fn first_infeasible(&self, tol: f64) -> Option<usize> {
        self.rows().position(|row| {
            let sum: f64 = row.iter().sum();
            (sum - 1.0).abs() > tol || row.iter().any(|&v| v < -tol || v > 1.0 + tol)
        })
    }

    /// Per-step argmax, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Output of the estimator.
#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    /// `x[0..=T]`
    pub x: Vec<DVector<f64>>,
    pub w_relaxed: ModeWeights,
    pub w_rounded: ModeWeights,
    /// `ρ(F(x))` at the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
}

impl TrajectoryEstimate {
    pub fn modes(&self) -> Vec<usize> {
        self.w_rounded.argmax()
    }
}

/// Result of [`jacobian_selfcheck`] for one map.
#[derive(Debug, Clone, Serialize)]
pub struct JacobianCheck {
    pub map: String,
    pub relative_error: f64,
    pub pass: bool,
}

/// Compares every analytic Jacobian against central differences with step
/// `h = 1e-6·max(1, ‖x‖∞)`. Relative error is `‖J_fd − J‖_F / max(1, ‖J‖_F)`.
pub fn jacobian_selfcheck(
    sys: &dyn SwitchedSystem,
    x: &DVector<f64>,
    tol: f64,
) -> Result<Vec<JacobianCheck>> {
    let h = 1e-6 * x.amax().max(1.0);
    let mut out = Vec::with_capacity(sys.num_modes() + 1);
    for m in 0..sys.num_modes() {
        let analytic = sys.process_jacobian(m, x);
        let numeric = central_difference(|p| sys.process(m, p), x, h);
        out.push(compare(&sys.mode_name(m), &analytic, &numeric, tol)?);
    }
    let analytic = sys.measurement_jacobian(x);
    let numeric = central_difference(|p| sys.measure(p), x, h);
    out.push(compare("H", &analytic, &numeric, tol)?);
    Ok(out)
}

fn central_difference<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let rows = f(x).len();
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut p = x.clone();
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let fp = f(&p);
        p[j] = x[j] - h;
        let fm = f(&p);
        p[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

fn compare(
    name: &str,
    analytic: &DMatrix<f64>,
    numeric: &DMatrix<f64>,
    tol: f64,
) -> Result<JacobianCheck> {
    if analytic.iter().chain(numeric.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteModelOutput(name.to_string()));
    }
    if analytic.shape() != numeric.shape() {
        return Err(Error::DimensionMismatch {
            what: format!("Jacobian of {name}"),
            expected: numeric.len(),
            actual: analytic.len(),
        });
    }
    let relative_error = (analytic - numeric).norm() / analytic.norm().max(1.0);
    Ok(JacobianCheck {
        map: name.to_string(),
        relative_error,
        pass: relative_error < tol,
    })
}

//! The relaxed estimation objective
//!
//! ```text
//! f(x, w) = Σ_t ½‖R^{-1/2}(y[t] − H(x[t]))‖²
//!         + Σ_t Σ_m w[t][m] · s(x[t+1] − F_m(x[t]))
//!         + ν Σ_t ‖w[t+1] − w[t]‖²,          w[t] ∈ Δ^M
//! ```
//!
//! together with its gradient in `x` at fixed `w` and the convex-composite
//! split `ρ(F(x))` used by the Gauss-Newton outer loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::BlockVector;
use crate::model::{Covariance, EstimationProblem, ModeWeights, ProcessPenalty};

/// Tolerance for simplex membership of the mode weights.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// `r·log(r + ‖Q^{-1/2}e‖²) − r·log(r)`; zero exactly when `e = 0`.
pub fn student_t_nll(e: &DVector<f64>, q: &Covariance, dof: f64) -> f64 {
    ProcessPenalty::StudentT { dof }.value(q.mahalanobis_sq(e))
}

/// `2r·Q⁻¹e / (r + ‖Q^{-1/2}e‖²)`
pub fn student_t_grad(e: &DVector<f64>, q: &Covariance, dof: f64) -> DVector<f64> {
    let z = q.mahalanobis_sq(e);
    q.apply_inverse(e) * ProcessPenalty::StudentT { dof }.gradient_scale(z)
}

/// `½‖R^{-1/2}δ‖²`
pub fn gaussian_nll(delta: &DVector<f64>, r: &Covariance) -> f64 {
    0.5 * r.mahalanobis_sq(delta)
}

/// Every per-step residual and penalty of `f` at a fixed `x`.
///
/// Process quantities are indexed `t * M + m` for `t = 0..T`.
#[derive(Debug, Clone)]
pub struct PenaltyTerms {
    pub horizon: usize,
    pub modes: usize,
    /// `H(x[t]) − y[t]`
    pub meas_residuals: BlockVector,
    /// `Σ_t ½‖H(x[t]) − y[t]‖²_{R⁻¹}`
    pub meas_value: f64,
    /// `e[t][m] = x[t+1] − F_m(x[t])`
    pub process_residuals: BlockVector,
    /// `z[t][m] = ‖e[t][m]‖²_{Q⁻¹}`
    pub mahalanobis: Vec<f64>,
    /// `s[t][m]`, the process penalty of `e[t][m]`
    pub penalties: Vec<f64>,
    /// `∇F_m(x[t])`, only when requested
    pub process_jacobians: Vec<DMatrix<f64>>,
    /// `∇H(x[t])`, only when requested
    pub meas_jacobians: Vec<DMatrix<f64>>,
}

impl PenaltyTerms {
    pub fn evaluate(p: &EstimationProblem, x: &[DVector<f64>], with_jacobians: bool) -> Result<Self> {
        let horizon = p.horizon();
        let n = p.state_dim();
        let modes = p.num_modes();
        let sys = p.system();
        if x.len() != horizon + 1 {
            return Err(Error::DimensionMismatch {
                what: "trajectory length (T + 1)".into(),
                expected: horizon + 1,
                actual: x.len(),
            });
        }
        if let Some(bad) = x.iter().find(|v| v.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "state dimension".into(),
                expected: n,
                actual: bad.len(),
            });
        }

        let mut meas_residuals = Vec::with_capacity(horizon);
        let mut meas_value = 0.0;
        let mut meas_jacobians = Vec::new();
        for (t, y) in p.measurements().iter().enumerate() {
            let res = sys.measure(&x[t]) - y;
            meas_value += gaussian_nll(&res, p.r());
            meas_residuals.push(res);
            if with_jacobians {
                meas_jacobians.push(sys.measurement_jacobian(&x[t]));
            }
        }

        let penalty = p.settings().penalty;
        let mut process_residuals = Vec::with_capacity(horizon * modes);
        let mut mahalanobis = Vec::with_capacity(horizon * modes);
        let mut penalties = Vec::with_capacity(horizon * modes);
        let mut process_jacobians = Vec::new();
        for t in 0..horizon {
            for m in 0..modes {
                let e = &x[t + 1] - sys.process(m, &x[t]);
                let z = p.q().mahalanobis_sq(&e);
                process_residuals.push(e);
                mahalanobis.push(z);
                penalties.push(penalty.value(z));
                if with_jacobians {
                    process_jacobians.push(sys.process_jacobian(m, &x[t]));
                }
            }
        }

        if !meas_value.is_finite() || penalties.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteModelOutput("objective terms".into()));
        }
        Ok(Self {
            horizon,
            modes,
            meas_residuals,
            meas_value,
            process_residuals,
            mahalanobis,
            penalties,
            process_jacobians,
            meas_jacobians,
        })
    }

    pub fn has_jacobians(&self) -> bool {
        !self.process_jacobians.is_empty()
    }

    /// `Σ_t Σ_m w[t][m]·s[t][m]`
    pub fn weighted_process_value(&self, w: &ModeWeights) -> f64 {
        w.as_slice()
            .iter()
            .zip(&self.penalties)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `Σ_t ∇H(x[t])ᵀ R⁻¹ (H(x[t]) − y[t])`, the gradient of `½‖f2‖²_{R⁻¹}`.
    pub fn measurement_gradient(&self, p: &EstimationProblem) -> BlockVector {
        assert!(self.has_jacobians(), "terms were evaluated without Jacobians");
        let mut g: BlockVector = vec![DVector::zeros(p.state_dim()); self.horizon + 1];
        for t in 0..self.horizon {
            g[t] += self.meas_jacobians[t].tr_mul(&p.r().apply_inverse(&self.meas_residuals[t]));
        }
        g
    }
}

/// `ν Σ_{t=0}^{T−2} ‖w[t+1] − w[t]‖²`
pub fn smoothing_value(w: &ModeWeights, nu: f64) -> f64 {
    if nu == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 1..w.horizon() {
        acc += w
            .row(t)
            .iter()
            .zip(w.row(t - 1))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    nu * acc
}

/// `f(x, w)` (plus `(β/2)‖w‖²` when `include_beta`) from precomputed terms.
pub fn objective_from_terms(
    terms: &PenaltyTerms,
    w: &ModeWeights,
    p: &EstimationProblem,
    include_beta: bool,
) -> f64 {
    let s = p.settings();
    let mut v = terms.meas_value + terms.weighted_process_value(w) + smoothing_value(w, s.nu);
    if include_beta {
        v += 0.5 * s.beta * w.norm_squared();
    }
    v
}

fn check_weights(w: &ModeWeights, p: &EstimationProblem) -> Result<()> {
    if w.horizon() != p.horizon() || w.modes() != p.num_modes() {
        return Err(Error::DimensionMismatch {
            what: "mode weights (T × M)".into(),
            expected: p.horizon() * p.num_modes(),
            actual: w.horizon() * w.modes(),
        });
    }
    match w.first_infeasible(SIMPLEX_TOL) {
        Some(t) => Err(Error::InfeasibleW { t }),
        None => Ok(()),
    }
}

/// The relaxed objective `f(x, w)`; the simplex indicator surfaces as
/// [`Error::InfeasibleW`] instead of an infinite value.
pub fn full_objective(
    x: &[DVector<f64>],
    w: &ModeWeights,
    p: &EstimationProblem,
    include_beta: bool,
) -> Result<f64> {
    check_weights(w, p)?;
    let terms = PenaltyTerms::evaluate(p, x, false)?;
    Ok(objective_from_terms(&terms, w, p, include_beta))
}

/// `∂_x f(x, w)` from terms evaluated with Jacobians.
pub fn grad_from_terms(terms: &PenaltyTerms, w: &ModeWeights, p: &EstimationProblem) -> BlockVector {
    let mut g = terms.measurement_gradient(p);
    let penalty = p.settings().penalty;
    let modes = terms.modes;
    for t in 0..terms.horizon {
        for (m, &wt) in w.row(t).iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let k = t * modes + m;
            let scale = wt * penalty.gradient_scale(terms.mahalanobis[k]);
            let ge = p.q().apply_inverse(&terms.process_residuals[k]) * scale;
            g[t] -= terms.process_jacobians[k].tr_mul(&ge);
            g[t + 1] += ge;
        }
    }
    g
}

/// Exact gradient of `f(x, w)` in `x` at fixed feasible `w`.
pub fn grad_x_full(x: &[DVector<f64>], w: &ModeWeights, p: &EstimationProblem) -> Result<BlockVector> {
    check_weights(w, p)?;
    let terms = PenaltyTerms::evaluate(p, x, true)?;
    Ok(grad_from_terms(&terms, w, p))
}

/// `(min_m g[m], one-hot argmin)` with ties broken toward the lowest index.
pub fn reduce_over_onehot(g: &[f64]) -> (f64, Vec<f64>) {
    assert!(!g.is_empty(), "need at least one mode");
    let (best, value) = g
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let mut onehot = vec![0.0; g.len()];
    onehot[best] = 1.0;
    (value, onehot)
}

/// Convex-composite split `v_β = ρ ∘ F` with `F = (f1, f2)`.
///
/// `f1` carries the process, smoothing and Moreau terms at `w = w(x)`; `f2`
/// stacks the measurement residuals `H(x) − y`.
#[derive(Debug, Clone)]
pub struct CompositeSplit {
    pub f1: f64,
    pub f2: BlockVector,
}

impl CompositeSplit {
    pub fn new(terms: &PenaltyTerms, w: &ModeWeights, p: &EstimationProblem) -> Self {
        let s = p.settings();
        let f1 = terms.weighted_process_value(w)
            + smoothing_value(w, s.nu)
            + 0.5 * s.beta * w.norm_squared();
        Self {
            f1,
            f2: terms.meas_residuals.clone(),
        }
    }

    pub fn value(&self, r: &Covariance) -> f64 {
        rho(self.f1, &self.f2, r).expect("f1 is a sum of nonnegative terms")
    }
}

/// `ρ(c, u) = c + ½‖u‖²_{R⁻¹} + I{c ≥ 0}`; `None` where the indicator is infinite.
pub fn rho(c: f64, u: &[DVector<f64>], r: &Covariance) -> Option<f64> {
    if c < 0.0 {
        return None;
    }
    Some(c + u.iter().map(|v| gaussian_nll(v, r)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CovarianceRole;
    use crate::model::EstimatorSettings;
    use crate::testing::{random_instance, random_weights};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_cov(n: usize) -> Covariance {
        Covariance::identity_scaled(n, 1.0, CovarianceRole::Process).unwrap()
    }

    #[test]
    fn student_t_scalar_values() {
        let q = unit_cov(1);
        assert_eq!(student_t_nll(&DVector::zeros(1), &q, 1.0), 0.0);
        assert_relative_eq!(student_t_nll(&DVector::from_element(1, 1.0), &q, 1.0), 2f64.ln(), epsilon = 1e-15);
        // Same value via the unsimplified form r·log(r + z) − r·log(r).
        let e: DVector<f64> = DVector::from_vec(vec![0.3, -2.0]);
        let direct = 0.7 * (0.7f64 + e.norm_squared()).ln() - 0.7 * 0.7f64.ln();
        assert_relative_eq!(student_t_nll(&e, &unit_cov(2), 0.7), direct, max_relative = 1e-14);
    }

    #[test]
    fn student_t_gradient_matches_central_differences() {
        let q = Covariance::new(
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]),
            CovarianceRole::Process,
        )
        .unwrap();
        let e = DVector::from_vec(vec![0.4, -1.1, 0.25]);
        let g = student_t_grad(&e, &q, 0.3);
        let h = 1e-6;
        for i in 0..3 {
            let mut ep = e.clone();
            ep[i] += h;
            let mut em = e.clone();
            em[i] -= h;
            let fd = (student_t_nll(&ep, &q, 0.3) - student_t_nll(&em, &q, 0.3)) / (2.0 * h);
            assert_relative_eq!(g[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn gaussian_nll_values() {
        let r = Covariance::identity_scaled(1, 4.0, CovarianceRole::Measurement).unwrap();
        assert_eq!(gaussian_nll(&DVector::zeros(1), &r), 0.0);
        assert_relative_eq!(gaussian_nll(&DVector::from_element(1, 2.0), &r), 0.5);
        let d = DVector::from_element(1, 0.7);
        assert_relative_eq!(gaussian_nll(&(&d * 2.0), &r), 4.0 * gaussian_nll(&d, &r), max_relative = 1e-15);
    }

    #[test]
    fn onehot_reduction() {
        assert_eq!(reduce_over_onehot(&[1.0, 3.0]), (1.0, vec![1.0, 0.0]));
        assert_eq!(reduce_over_onehot(&[2.0, 2.0]), (2.0, vec![1.0, 0.0]));
    }

    #[test]
    fn half_half_weights_average_the_mode_penalties() {
        let settings = EstimatorSettings { nu: 0.0, ..Default::default() };
        let inst = random_instance(6, 3, 2, 2, settings, 4);
        let terms = PenaltyTerms::evaluate(&inst.problem, &inst.x, false).unwrap();
        let half = ModeWeights::uniform(6, 2);
        let only = |m: usize| ModeWeights::from_modes(&[m; 6], 2);
        let fa = objective_from_terms(&terms, &only(0), &inst.problem, false);
        let fb = objective_from_terms(&terms, &only(1), &inst.problem, false);
        let fh = objective_from_terms(&terms, &half, &inst.problem, false);
        assert_relative_eq!(fh, 0.5 * (fa + fb), max_relative = 1e-14);
    }

    #[test]
    fn objective_matches_naive_summation() {
        let settings = EstimatorSettings { nu: 0.7, ..Default::default() };
        for seed in 0..5 {
            let inst = random_instance(8, 3, 2, 3, settings, seed);
            let p = &inst.problem;
            let sys = p.system();
            let qi = p.q().matrix().clone().try_inverse().unwrap();
            let ri = p.r().matrix().clone().try_inverse().unwrap();
            let dof = match p.settings().penalty {
                ProcessPenalty::StudentT { dof } => dof,
                ProcessPenalty::Gaussian => unreachable!(),
            };
            let mut naive = 0.0;
            for t in 0..p.horizon() {
                let dy = &p.measurements()[t] - sys.measure(&inst.x[t]);
                naive += 0.5 * (dy.transpose() * &ri * &dy)[(0, 0)];
                for m in 0..p.num_modes() {
                    let e = &inst.x[t + 1] - sys.process(m, &inst.x[t]);
                    let z = (e.transpose() * &qi * &e)[(0, 0)];
                    naive += inst.w.row(t)[m] * (dof * (dof + z).ln() - dof * dof.ln());
                }
                if t + 1 < p.horizon() {
                    for m in 0..p.num_modes() {
                        naive += 0.7 * (inst.w.row(t + 1)[m] - inst.w.row(t)[m]).powi(2);
                    }
                }
            }
            let f = full_objective(&inst.x, &inst.w, p, false).unwrap();
            assert_relative_eq!(f, naive, max_relative = 1e-10);
        }
    }

    #[test]
    fn infeasible_weights_are_flagged() {
        let inst = random_instance(4, 2, 1, 2, EstimatorSettings::default(), 1);
        let mut rows: Vec<Vec<f64>> = inst.w.rows().map(<[f64]>::to_vec).collect();
        rows[2] = vec![0.7, 0.7];
        let bad = ModeWeights::from_rows(&rows);
        assert!(matches!(
            full_objective(&inst.x, &bad, &inst.problem, false),
            Err(Error::InfeasibleW { t: 2 })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inst = random_instance(10, 4, 2, 4, EstimatorSettings::default(), 3);
        let p = &inst.problem;
        let w = random_weights(10, 4, &mut rng);
        let g = grad_x_full(&inst.x, &w, p).unwrap();
        let mut x = inst.x.clone();
        let h = 1e-6;
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for t in 0..x.len() {
            for i in 0..4 {
                let orig = x[t][i];
                x[t][i] = orig + h;
                let fp = full_objective(&x, &w, p, false).unwrap();
                x[t][i] = orig - h;
                let fm = full_objective(&x, &w, p, false).unwrap();
                x[t][i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                err = err.max((fd - g[t][i]).abs());
                scale = scale.max(g[t][i].abs());
            }
        }
        assert!(err / scale < 1e-5, "relative error {}", err / scale);
    }

    #[test]
    fn doubling_r_halves_measurement_gradient() {
        let inst = random_instance(5, 3, 2, 2, EstimatorSettings::default(), 8);
        let p = &inst.problem;
        let p2 = EstimationProblem::new(
            p.system_arc(),
            p.measurements().to_vec(),
            p.q().matrix().clone(),
            p.r().matrix() * 2.0,
            *p.settings(),
        )
        .unwrap();
        let g1 = PenaltyTerms::evaluate(p, &inst.x, true).unwrap().measurement_gradient(p);
        let g2 = PenaltyTerms::evaluate(&p2, &inst.x, true).unwrap().measurement_gradient(&p2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a * 0.5 - b).amax() < 1e-12);
        }
    }
}

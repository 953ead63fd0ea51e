//! Outer loop: Gauss-Newton directions on the smoothed value function,
//! Armijo backtracking on the convex-composite model decrease, and a
//! steepest-descent baseline sharing the same machinery.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::{round_to_onehot, solve_w, value_and_grad, InnerSolution};
use crate::linalg::{self, BlockCholesky, BlockTridiagonal, BlockVector};
use crate::model::{EstimationProblem, ModeWeights, TrajectoryEstimate};
use crate::objective::{grad_from_terms, objective_from_terms, CompositeSplit, PenaltyTerms, SIMPLEX_TOL};

/// Curvature `U(x) = Σ_m G_mᵀ Q̃_m⁻¹ G_m` of the process terms.
///
/// With `c[t][m] = w[t][m]·2r / (r + ‖x[t+1] − F_m(x[t])‖²_{Q⁻¹})` and
/// `J[t][m] = ∇F_m(x[t])`:
///
/// ```text
/// U[t][t]   = Σ_m c[t][m] J[t][m]ᵀ Q⁻¹ J[t][m] + Σ_m c[t−1][m] Q⁻¹
/// U[t+1][t] = −Σ_m c[t][m] Q⁻¹ J[t][m]
/// ```
///
/// The final block `U[T][T] = Σ_m c[T−1][m] Q⁻¹` keeps the sum over modes.
pub fn assemble_u(x: &[DVector<f64>], w: &ModeWeights, p: &EstimationProblem) -> Result<BlockTridiagonal> {
    let terms = PenaltyTerms::evaluate(p, x, true)?;
    Ok(assemble_u_from_terms(&terms, w, p))
}

pub fn assemble_u_from_terms(terms: &PenaltyTerms, w: &ModeWeights, p: &EstimationProblem) -> BlockTridiagonal {
    let n = p.state_dim();
    let penalty = p.settings().penalty;
    let qinv = p.q().inverse();
    let mut u = BlockTridiagonal::zeros(terms.horizon + 1, n);
    for t in 0..terms.horizon {
        for (m, &wt) in w.row(t).iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let k = t * terms.modes + m;
            let weight = wt * penalty.curvature_scale(terms.mahalanobis[k]);
            let jac = &terms.process_jacobians[k];
            let wq_j = qinv * jac * weight;
            u.diag[t] += jac.tr_mul(&wq_j);
            u.diag[t + 1] += qinv * weight;
            u.lower[t] -= wq_j;
        }
    }
    u
}

#[derive(Debug, Clone)]
pub struct DirectionResult {
    pub direction: BlockVector,
    /// Predicted decrease `Δ(x; d) ≤ 0`.
    pub model_decrease: f64,
    /// `‖S d + ∇v_β‖` for the solved system `S`.
    pub residual_norm: f64,
    /// The linearized `f1 + ∇f1·d` went negative, where the composite model's
    /// indicator would be infinite; `model_decrease` reports the smooth value.
    pub linearized_f1_negative: bool,
}

/// Solves `(U + μI + ∇Hᵀ R⁻¹ ∇H) d = −∇v_β` with the block Cholesky
/// factorization and evaluates `Δ(x; d) = ∇v_βᵀd + ½ dᵀ(U + μI + ∇HᵀR⁻¹∇H)d`,
/// which equals `ρ(F + F'd) + ½dᵀUd − ρ(F)` for the linearized composite.
pub fn solve_direction(
    u: &BlockTridiagonal,
    terms: &PenaltyTerms,
    w: &ModeWeights,
    p: &EstimationProblem,
    grad: &[DVector<f64>],
) -> Result<DirectionResult> {
    let mut base = u.clone();
    let rinv = p.r().inverse();
    for t in 0..terms.horizon {
        let jac = &terms.meas_jacobians[t];
        base.diag[t] += jac.tr_mul(&(rinv * jac));
    }

    if grad.iter().all(|g| g.iter().all(|&v| v == 0.0)) {
        return Ok(DirectionResult {
            direction: grad.iter().map(|g| DVector::zeros(g.len())).collect(),
            model_decrease: 0.0,
            residual_norm: 0.0,
            linearized_f1_negative: false,
        });
    }

    let (system, factor) = factor_with_ridge(&base, p.settings().damping)?;
    let rhs = linalg::scale(grad, -1.0);
    let direction = factor.solve(&rhs)?;
    let sd = system.mul_vec(&direction);
    let residual_norm = linalg::norm(&linalg::axpy(&sd, 1.0, grad));
    let model_decrease = (linalg::dot(grad, &direction) + 0.5 * linalg::dot(&direction, &sd)).min(0.0);

    let split = CompositeSplit::new(terms, w, p);
    let grad_f1 = linalg::axpy(grad, -1.0, &terms.measurement_gradient(p));
    let linearized_f1_negative = split.f1 + linalg::dot(&grad_f1, &direction) < 0.0;

    Ok(DirectionResult {
        direction,
        model_decrease,
        residual_norm,
        linearized_f1_negative,
    })
}

/// Attempts before `factor_with_ridge` gives up.
const RIDGE_ATTEMPTS: usize = 12;

/// Factors `base + μI`, growing `μ` a hundredfold after each failed
/// factorization. Returns the matrix that was factored.
fn factor_with_ridge(base: &BlockTridiagonal, damping: f64) -> Result<(BlockTridiagonal, BlockCholesky)> {
    let scale = base.diag.iter().map(|b| b.diagonal().amax()).fold(0.0, f64::max);
    let mut mu = damping;
    let mut last = None;
    for attempt in 0..RIDGE_ATTEMPTS {
        let mut system = base.clone();
        system.add_identity(mu);
        match system.cholesky() {
            Ok(factor) => {
                if attempt > 0 {
                    log::debug!("block Cholesky needed ridge {mu:.3e}");
                }
                return Ok((system, factor));
            }
            Err(e) => last = Some(e),
        }
        mu = (mu * 100.0).max(scale * 1e-14);
    }
    Err(last.expect("at least one attempt"))
}

/// Steepest-descent direction `d = −∇v_β` with `Δ = ∇v_βᵀd + ½‖d‖²`.
pub fn steepest_direction(grad: &[DVector<f64>]) -> DirectionResult {
    let direction = linalg::scale(grad, -1.0);
    let model_decrease = -0.5 * linalg::dot(grad, grad);
    DirectionResult {
        direction,
        model_decrease,
        residual_norm: 0.0,
        linearized_f1_negative: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    #[default]
    GaussNewton,
    SteepestDescent,
}

/// How the weights are handled during the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightPolicy {
    /// Re-solve `w(x)` at every trial point (variable projection).
    Optimize,
    /// Hold the weights fixed (e.g. known ground-truth modes).
    Fixed(ModeWeights),
}

/// The function `ρ(F(x))` minimized by the outer loop, under a weight policy.
#[derive(Debug, Clone, Copy)]
pub struct OuterObjective<'a> {
    pub problem: &'a EstimationProblem,
    pub policy: &'a WeightPolicy,
}

/// An evaluated outer iterate.
#[derive(Debug, Clone)]
pub struct Iterate {
    pub x: BlockVector,
    pub value: f64,
    pub w: ModeWeights,
    pub gradient: BlockVector,
    pub terms: PenaltyTerms,
    pub inner: Option<InnerSolution>,
}

impl<'a> OuterObjective<'a> {
    pub fn value(&self, x: &[DVector<f64>], warm: &ModeWeights) -> Result<(f64, ModeWeights, Option<InnerSolution>)> {
        match self.policy {
            WeightPolicy::Optimize => {
                let sol = solve_w(x, self.problem, warm)?;
                Ok((sol.value, sol.inner.w.clone(), Some(sol.inner)))
            }
            WeightPolicy::Fixed(w) => {
                let terms = PenaltyTerms::evaluate(self.problem, x, false)?;
                Ok((objective_from_terms(&terms, w, self.problem, true), w.clone(), None))
            }
        }
    }

    pub fn evaluate(&self, x: BlockVector, warm: &ModeWeights) -> Result<Iterate> {
        match self.policy {
            WeightPolicy::Optimize => {
                let vg = value_and_grad(&x, self.problem, warm)?;
                Ok(Iterate {
                    x,
                    value: vg.value,
                    w: vg.solve.inner.w.clone(),
                    gradient: vg.gradient,
                    terms: vg.solve.terms,
                    inner: Some(vg.solve.inner),
                })
            }
            WeightPolicy::Fixed(w) => {
                let terms = PenaltyTerms::evaluate(self.problem, &x, true)?;
                let value = objective_from_terms(&terms, w, self.problem, true);
                let gradient = grad_from_terms(&terms, w, self.problem);
                Ok(Iterate {
                    x,
                    value,
                    w: w.clone(),
                    gradient,
                    terms,
                    inner: None,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub accepted: bool,
    /// `γ^l` of the accepted trial (0 when exhausted).
    pub step: f64,
    pub backtracks: usize,
    pub x: BlockVector,
    pub value: f64,
    pub w: ModeWeights,
    pub inner_iterations: usize,
}

/// Armijo backtracking: the first `l ≥ 0` with
/// `ρ(F(x + γ^l d)) ≤ ρ(F(x)) + c·γ^l·Δ(x; d)`. Each trial re-evaluates the
/// objective (a fresh weight solve under [`WeightPolicy::Optimize`]). Trial
/// points where the model is non-finite count as failed trials.
pub fn line_search(
    objective: &OuterObjective<'_>,
    at: &Iterate,
    d: &[DVector<f64>],
    model_decrease: f64,
) -> Result<LineSearchOutcome> {
    let ls = objective.problem.settings().line_search;
    let mut step = 1.0;
    let mut inner_iterations = 0;
    for l in 0..=ls.max_backtracks {
        let trial = linalg::axpy(&at.x, step, d);
        match objective.value(&trial, &at.w) {
            Ok((value, w, inner)) => {
                inner_iterations += inner.map_or(0, |s| s.iterations);
                if value <= at.value + ls.c * step * model_decrease {
                    return Ok(LineSearchOutcome {
                        accepted: true,
                        step,
                        backtracks: l,
                        x: trial,
                        value,
                        w,
                        inner_iterations,
                    });
                }
            }
            Err(Error::NonFiniteModelOutput(_)) => {}
            Err(e) => return Err(e),
        }
        step *= ls.gamma;
    }
    Ok(LineSearchOutcome {
        accepted: false,
        step: 0.0,
        backtracks: ls.max_backtracks,
        x: at.x.clone(),
        value: at.value,
        w: at.w.clone(),
        inner_iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `−Δ(x; d) ≤ ε`
    Converged,
    MaxIterations,
    LineSearchExhausted,
}

#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    pub direction: DirectionMode,
    /// Hold the weights fixed at these values instead of solving for them.
    pub fixed_weights: Option<ModeWeights>,
    /// Record `λ_min` of the dense curvature at every iterate (small problems only).
    pub track_curvature: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub direction: DirectionMode,
    /// Accepted outer iterations.
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// `ρ(F(x))` at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// `f(x, w)` without the Moreau term, same indexing as `objective_trace`.
    pub loss_trace: Vec<f64>,
    /// `Δ(x_k; d_k)` for every direction computed, including the final one.
    pub model_decrease: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub direction_norms: Vec<f64>,
    pub max_direction_norm: f64,
    pub inner_iterations: usize,
    /// Weight solves that stopped at the iteration cap.
    pub inner_cap_hits: usize,
    /// Directions whose linearized `f1` went negative.
    pub indicator_violations: usize,
    /// `λ_min(U + μI)` per iterate, when tracked.
    pub min_curvature_eigenvalues: Vec<f64>,
    pub wall_time_s: f64,
}

impl ConvergenceReport {
    pub fn final_model_decrease(&self) -> f64 {
        self.model_decrease.last().copied().unwrap_or(0.0)
    }

    pub fn stalled(&self) -> bool {
        self.stop_reason == StopReason::LineSearchExhausted
    }
}

/// Runs the variable-projection outer loop from `x_init`, warm-starting the
/// weights from `w_init` (uniform when `None`).
pub fn estimate(
    p: &EstimationProblem,
    x_init: &[DVector<f64>],
    w_init: Option<&ModeWeights>,
    options: &EstimateOptions,
) -> Result<(TrajectoryEstimate, ConvergenceReport)> {
    let started = Instant::now();
    let settings = *p.settings();
    let (horizon, modes) = (p.horizon(), p.num_modes());

    let policy = match &options.fixed_weights {
        Some(w) => {
            if w.horizon() != horizon || w.modes() != modes {
                return Err(Error::DimensionMismatch {
                    what: "fixed mode weights (T × M)".into(),
                    expected: horizon * modes,
                    actual: w.horizon() * w.modes(),
                });
            }
            if let Some(t) = w.first_infeasible(SIMPLEX_TOL) {
                return Err(Error::InfeasibleW { t });
            }
            WeightPolicy::Fixed(w.clone())
        }
        None => WeightPolicy::Optimize,
    };
    let objective = OuterObjective { problem: p, policy: &policy };
    let warm = match w_init {
        Some(w) if w.horizon() == horizon && w.modes() == modes => w.clone(),
        Some(w) => {
            return Err(Error::DimensionMismatch {
                what: "initial mode weights (T × M)".into(),
                expected: horizon * modes,
                actual: w.horizon() * w.modes(),
            })
        }
        None => ModeWeights::uniform(horizon, modes),
    };

    let mut at = objective.evaluate(x_init.to_vec(), &warm)?;
    let mut report = ConvergenceReport {
        direction: options.direction,
        iterations: 0,
        stop_reason: StopReason::MaxIterations,
        objective_trace: vec![at.value],
        loss_trace: vec![objective_from_terms(&at.terms, &at.w, p, false)],
        model_decrease: Vec::new(),
        step_sizes: Vec::new(),
        direction_norms: Vec::new(),
        max_direction_norm: 0.0,
        inner_iterations: 0,
        inner_cap_hits: 0,
        indicator_violations: 0,
        min_curvature_eigenvalues: Vec::new(),
        wall_time_s: 0.0,
    };
    let note_inner = |report: &mut ConvergenceReport, inner: &Option<InnerSolution>| {
        if let Some(s) = inner {
            report.inner_iterations += s.iterations;
            if !s.converged {
                report.inner_cap_hits += 1;
            }
        }
    };
    note_inner(&mut report, &at.inner);

    loop {
        let dir = match options.direction {
            DirectionMode::GaussNewton => {
                let u = assemble_u_from_terms(&at.terms, &at.w, p);
                if options.track_curvature {
                    let mut ueff = u.clone();
                    ueff.add_identity(settings.damping);
                    report.min_curvature_eigenvalues.push(min_eigenvalue(&ueff.to_dense()));
                }
                solve_direction(&u, &at.terms, &at.w, p, &at.gradient)?
            }
            DirectionMode::SteepestDescent => steepest_direction(&at.gradient),
        };
        let dnorm = linalg::norm(&dir.direction);
        report.model_decrease.push(dir.model_decrease);
        report.direction_norms.push(dnorm);
        report.max_direction_norm = report.max_direction_norm.max(dnorm);
        if dir.linearized_f1_negative {
            report.indicator_violations += 1;
        }

        if -dir.model_decrease <= settings.epsilon {
            report.stop_reason = StopReason::Converged;
            break;
        }
        if report.iterations >= settings.outer_max_iters {
            report.stop_reason = StopReason::MaxIterations;
            break;
        }

        let ls = line_search(&objective, &at, &dir.direction, dir.model_decrease)?;
        report.inner_iterations += ls.inner_iterations;
        if !ls.accepted {
            log::warn!(
                "line search exhausted at iteration {} (Δ = {:.3e})",
                report.iterations,
                dir.model_decrease
            );
            report.stop_reason = StopReason::LineSearchExhausted;
            break;
        }
        report.step_sizes.push(ls.step);

        let next = objective.evaluate(ls.x, &ls.w)?;
        note_inner(&mut report, &next.inner);
        at = next;
        report.iterations += 1;
        report.objective_trace.push(at.value);
        report.loss_trace.push(objective_from_terms(&at.terms, &at.w, p, false));
        log::debug!(
            "iter {:4}  v = {:.10e}  Δ = {:.3e}  step = {:.3e}",
            report.iterations,
            at.value,
            dir.model_decrease,
            ls.step
        );
    }

    report.wall_time_s = started.elapsed().as_secs_f64();
    let estimate = TrajectoryEstimate {
        w_rounded: round_to_onehot(&at.w),
        w_relaxed: at.w,
        x: at.x,
        objective_trace: report.objective_trace.clone(),
    };
    Ok((estimate, report))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

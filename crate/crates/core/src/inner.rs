//! Partial minimization over the mode weights.
//!
//! For fixed `x` the weights solve the strongly convex quadratic program
//!
//! ```text
//! min_w  Σ_t Σ_m s[t][m]·w[t][m] + ν Σ_t ‖w[t+1] − w[t]‖² + (β/2)‖w‖²,   w[t] ∈ Δ^M
//! ```
//!
//! whose optimal value (plus the measurement terms) is the smoothed value
//! function `v_β(x)`. Its gradient is `∂_x f(x, w)` evaluated at the minimizer.

use nalgebra::DVector;

use crate::error::Result;
use crate::linalg::BlockVector;
use crate::model::{EstimationProblem, InnerSettings, ModeWeights};
use crate::objective::{grad_from_terms, PenaltyTerms};

/// Euclidean projection onto the probability simplex (sort-based, exact).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    let mut scratch = Vec::with_capacity(v.len());
    project_simplex_in_place(&mut out, &mut scratch);
    out
}

fn project_simplex_in_place(v: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in scratch.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// The weight subproblem at a fixed `x`, defined by its linear costs `s[t][m]`.
#[derive(Debug, Clone, Copy)]
pub struct WSubproblem<'a> {
    pub costs: &'a [f64],
    pub horizon: usize,
    pub modes: usize,
    pub nu: f64,
    pub beta: f64,
}

impl<'a> WSubproblem<'a> {
    pub fn new(costs: &'a [f64], horizon: usize, modes: usize, nu: f64, beta: f64) -> Self {
        assert_eq!(costs.len(), horizon * modes);
        Self {
            costs,
            horizon,
            modes,
            nu,
            beta,
        }
    }

    pub fn from_terms(terms: &'a PenaltyTerms, p: &EstimationProblem) -> Self {
        let s = p.settings();
        Self::new(&terms.penalties, terms.horizon, terms.modes, s.nu, s.beta)
    }

    /// Upper bound on the Hessian spectrum: `β + 8ν` (chain Laplacian ≤ 4).
    pub fn lipschitz(&self) -> f64 {
        self.beta + 8.0 * self.nu
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let m = self.modes;
        let mut v = 0.0;
        for (k, &wk) in w.iter().enumerate() {
            v += self.costs[k] * wk + 0.5 * self.beta * wk * wk;
        }
        if self.nu > 0.0 {
            for k in m..w.len() {
                let d = w[k] - w[k - m];
                v += self.nu * d * d;
            }
        }
        v
    }

    pub fn gradient(&self, w: &[f64], out: &mut [f64]) {
        let m = self.modes;
        let len = w.len();
        for k in 0..len {
            let mut g = self.costs[k] + self.beta * w[k];
            if self.nu > 0.0 {
                if k >= m {
                    g += 2.0 * self.nu * (w[k] - w[k - m]);
                }
                if k + m < len {
                    g += 2.0 * self.nu * (w[k] - w[k + m]);
                }
            }
            out[k] = g;
        }
    }

    fn project(&self, w: &mut [f64], scratch: &mut Vec<f64>) {
        for row in w.chunks_mut(self.modes) {
            project_simplex_in_place(row, scratch);
        }
    }

    /// Accelerated projected gradient (FISTA, fixed step `1/L`) with
    /// gradient-based momentum restart. Stops when the gradient-mapping
    /// residual `L·‖y − P(y − ∇φ(y)/L)‖∞` drops below `settings.tol`.
    pub fn solve(&self, w_init: &ModeWeights, settings: &InnerSettings) -> InnerSolution {
        assert_eq!(w_init.horizon(), self.horizon);
        assert_eq!(w_init.modes(), self.modes);
        let lip = self.lipschitz();
        let step = 1.0 / lip;
        let len = self.horizon * self.modes;
        let mut scratch = Vec::with_capacity(self.modes);

        let mut start = w_init.as_slice().to_vec();
        self.project(&mut start, &mut scratch);
        let start_value = self.value(&start);

        let mut x = start.clone();
        let mut y = start.clone();
        let mut x_next = vec![0.0; len];
        let mut grad = vec![0.0; len];
        let mut momentum = 1.0f64;
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < settings.max_iters {
            iterations += 1;
            self.gradient(&y, &mut grad);
            for k in 0..len {
                x_next[k] = y[k] - step * grad[k];
            }
            self.project(&mut x_next, &mut scratch);

            residual = lip
                * y.iter()
                    .zip(&x_next)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
            if residual < settings.tol {
                std::mem::swap(&mut x, &mut x_next);
                converged = true;
                break;
            }

            // Restart when the momentum direction opposes the gradient step.
            let restart_dot: f64 = (0..len).map(|k| (y[k] - x_next[k]) * (x_next[k] - x[k])).sum();
            if restart_dot > 0.0 {
                momentum = 1.0;
                y.copy_from_slice(&x_next);
            } else {
                let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
                let coef = (momentum - 1.0) / next;
                for k in 0..len {
                    y[k] = x_next[k] + coef * (x_next[k] - x[k]);
                }
                momentum = next;
            }
            std::mem::swap(&mut x, &mut x_next);
        }

        let mut value = self.value(&x);
        if value > start_value {
            x = start;
            value = start_value;
        }
        InnerSolution {
            w: ModeWeights::from_raw(self.horizon, self.modes, x),
            objective: value,
            iterations,
            residual,
            converged,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub w: ModeWeights,
    /// Subproblem objective at `w`, including the `(β/2)‖w‖²` term.
    pub objective: f64,
    pub iterations: usize,
    pub residual: f64,
    /// `false` means the iteration cap was hit (the best iterate is still returned).
    pub converged: bool,
}

/// `w(x)` and `v_β(x)` at one trajectory.
#[derive(Debug, Clone)]
pub struct WSolve {
    pub value: f64,
    pub inner: InnerSolution,
    pub terms: PenaltyTerms,
}

impl WSolve {
    pub fn w(&self) -> &ModeWeights {
        &self.inner.w
    }
}

/// Solves the weight subproblem at `x`, warm-started from `w_init`.
pub fn solve_w(x: &[DVector<f64>], p: &EstimationProblem, w_init: &ModeWeights) -> Result<WSolve> {
    solve_w_with(x, p, w_init, false)
}

fn solve_w_with(
    x: &[DVector<f64>],
    p: &EstimationProblem,
    w_init: &ModeWeights,
    with_jacobians: bool,
) -> Result<WSolve> {
    let terms = PenaltyTerms::evaluate(p, x, with_jacobians)?;
    let inner = WSubproblem::from_terms(&terms, p).solve(w_init, &p.settings().inner);
    if !inner.converged {
        log::warn!(
            "inner solver hit {} iterations (residual {:.3e})",
            inner.iterations,
            inner.residual
        );
    }
    Ok(WSolve {
        value: terms.meas_value + inner.objective,
        inner,
        terms,
    })
}

#[derive(Debug, Clone)]
pub struct ValueAndGrad {
    pub value: f64,
    pub gradient: BlockVector,
    pub solve: WSolve,
}

impl ValueAndGrad {
    pub fn w(&self) -> &ModeWeights {
        self.solve.w()
    }
}

/// `v_β(x)`, `∇v_β(x) = ∂_x f(x, w)|_{w = w(x)}` and `w(x)`.
pub fn value_and_grad(x: &[DVector<f64>], p: &EstimationProblem, w_warm: &ModeWeights) -> Result<ValueAndGrad> {
    let solve = solve_w_with(x, p, w_warm, true)?;
    let gradient = grad_from_terms(&solve.terms, solve.w(), p);
    Ok(ValueAndGrad {
        value: solve.value,
        gradient,
        solve,
    })
}

/// Per-step argmax rounding to one-hot weights (ties to the lowest index).
pub fn round_to_onehot(w: &ModeWeights) -> ModeWeights {
    ModeWeights::from_modes(&w.argmax(), w.modes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EstimatorSettings;
    use crate::testing::{random_instance, random_weights};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        assert_eq!(project_simplex(&[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.6, 0.6]);
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn projection_satisfies_optimality_conditions() {
        // v − P(v) must be a normal vector of the simplex at P(v):
        // constant on the support and no larger off it.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = rng.random_range(1..6);
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = project_simplex(&v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let theta = v.iter().zip(&p).find(|(_, &pi)| pi > 0.0).map(|(vi, pi)| vi - pi).unwrap();
            for (vi, pi) in v.iter().zip(&p) {
                if *pi > 0.0 {
                    assert!((vi - pi - theta).abs() < 1e-12);
                } else {
                    assert!(*vi <= theta + 1e-12);
                }
            }
        }
    }

    #[test]
    fn separable_case_matches_per_step_kkt() {
        // ν = 0: each step solves min s·w + β/2‖w‖² on the 1-simplex. With
        // w = (a, 1 − a) stationarity gives a = (1 + (s2 − s1)/β)/2 clamped.
        let beta = 0.05;
        let costs = [0.0, 0.02, 0.3, 0.31, 1.0, 0.0, 0.5, 0.5];
        let sub = WSubproblem::new(&costs, 4, 2, 0.0, beta);
        let sol = sub.solve(&ModeWeights::uniform(4, 2), &InnerSettings::default());
        assert!(sol.converged);
        for t in 0..4 {
            let (s1, s2) = (costs[2 * t], costs[2 * t + 1]);
            let a = (0.5 * (1.0 + (s2 - s1) / beta)).clamp(0.0, 1.0);
            assert_relative_eq!(sol.w.row(t)[0], a, epsilon = 1e-12);
            assert_relative_eq!(sol.w.row(t)[1], 1.0 - a, epsilon = 1e-12);
        }
        // s2 ≪ s1 drives the weights to the second vertex.
        assert_eq!(sol.w.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn identical_costs_give_uniform_weights() {
        let costs = vec![0.4; 5 * 3];
        let sub = WSubproblem::new(&costs, 5, 3, 0.0, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sol = sub.solve(&random_weights(5, 3, &mut rng), &InnerSettings::default());
        for row in sol.w.rows() {
            for &v in row {
                assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    /// Plain projected gradient with a tenth of the step and many more
    /// iterations; slow but independent of the acceleration logic.
    fn slow_projected_gradient(sub: &WSubproblem, iters: usize) -> Vec<f64> {
        let len = sub.horizon * sub.modes;
        let step = 0.1 / sub.lipschitz();
        let mut w = ModeWeights::uniform(sub.horizon, sub.modes).as_slice().to_vec();
        let mut g = vec![0.0; len];
        for _ in 0..iters {
            sub.gradient(&w, &mut g);
            for k in 0..len {
                w[k] -= step * g[k];
            }
            for row in w.chunks_mut(sub.modes) {
                let p = project_simplex(row);
                row.copy_from_slice(&p);
            }
        }
        w
    }

    #[test]
    fn fista_matches_slow_projected_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, m) = (12, 3);
        let costs: Vec<f64> = (0..t * m).map(|_| rng.random_range(0.0..0.5)).collect();
        let sub = WSubproblem::new(&costs, t, m, 0.3, 0.05);
        let fast = sub.solve(&ModeWeights::uniform(t, m), &InnerSettings { max_iters: 100_000, tol: 1e-12 });
        let slow = slow_projected_gradient(&sub, 200_000);
        let diff = fast.w.as_slice().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-7, "{diff}");
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let inst = random_instance(10, 2, 1, 2, EstimatorSettings::default(), 21);
        let tight = inst.problem.with_settings(EstimatorSettings {
            inner: InnerSettings { max_iters: 200_000, tol: 1e-11 },
            ..*inst.problem.settings()
        }).unwrap();
        let cold = solve_w(&inst.x, &tight, &ModeWeights::uniform(10, 2)).unwrap();
        let warm = solve_w(&inst.x, &tight, &inst.w).unwrap();
        let diff = cold.w().as_slice().iter().zip(warm.w().as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
        assert!(cold.w().first_infeasible(1e-12).is_none());
    }

    #[test]
    fn rounding() {
        let w = ModeWeights::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 1.0]]);
        assert_eq!(round_to_onehot(&w).as_slice(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let tie = ModeWeights::from_rows(&[vec![0.5, 0.5]]);
        assert_eq!(round_to_onehot(&tie).as_slice(), &[1.0, 0.0]);
        let onehot = round_to_onehot(&w);
        assert_eq!(round_to_onehot(&onehot), onehot);
    }
}

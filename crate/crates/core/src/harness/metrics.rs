use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::gauss_newton::{ConvergenceReport, StopReason};

/// Samples on each side of an impact included in the impact window.
pub const IMPACT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Fraction of samples whose rounded mode equals the true mode.
    pub accuracy: f64,
    /// RMSE of `(q1, q2, q̇1, q̇2)` over `t = 0..T`.
    pub rmse: [f64; 4],
    /// `"unobservable"` when the measurements leave the trajectory unobservable.
    pub rmse_status: String,
    pub switches_estimate: usize,
    pub switches_true: usize,
    /// Foot-velocity RMSE within ±10 samples of each impact; `None` without impacts.
    pub impact_window_foot_velocity_rmse: Option<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_model_decrease: f64,
    pub max_direction_norm: f64,
    pub wall_time_s: f64,
}

pub fn accuracy(estimate: &[usize], truth: &[usize]) -> f64 {
    let hits = estimate.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

pub fn switch_count(modes: &[usize]) -> usize {
    modes.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Per-component RMSE over the first `len` samples.
pub fn rmse(estimate: &[DVector<f64>], truth: &[DVector<f64>], len: usize) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        let sse: f64 = (0..len).map(|t| (estimate[t][i] - truth[t][i]).powi(2)).sum();
        *o = (sse / len as f64).sqrt();
    }
    out
}

/// Sample indices within `±IMPACT_WINDOW` of any impact, clipped to `0..len`.
pub fn impact_window(impacts: &[usize], len: usize) -> Vec<usize> {
    let mut mask = vec![false; len];
    for &i in impacts {
        let lo = i.saturating_sub(IMPACT_WINDOW);
        let hi = (i + IMPACT_WINDOW).min(len.saturating_sub(1));
        for m in mask.iter_mut().take(hi + 1).skip(lo) {
            *m = true;
        }
    }
    (0..len).filter(|&t| mask[t]).collect()
}

pub fn impact_window_rmse(estimate: &[DVector<f64>], truth: &[DVector<f64>], impacts: &[usize], len: usize) -> Option<f64> {
    let idx = impact_window(impacts, len);
    if idx.is_empty() {
        return None;
    }
    let sse: f64 = idx.iter().map(|&t| (estimate[t][3] - truth[t][3]).powi(2)).sum();
    Some((sse / idx.len() as f64).sqrt())
}

pub struct MetricInputs<'a> {
    pub x_est: &'a [DVector<f64>],
    pub x_true: &'a [DVector<f64>],
    pub modes_est: &'a [usize],
    pub modes_true: &'a [usize],
    pub impacts: &'a [usize],
    pub observable: bool,
    pub report: &'a ConvergenceReport,
}

pub fn compute(inp: &MetricInputs<'_>) -> RunMetrics {
    let len = inp.modes_true.len();
    RunMetrics {
        accuracy: accuracy(inp.modes_est, inp.modes_true),
        rmse: rmse(inp.x_est, inp.x_true, len),
        rmse_status: if inp.observable { "ok" } else { "unobservable" }.into(),
        switches_estimate: switch_count(inp.modes_est),
        switches_true: switch_count(inp.modes_true),
        impact_window_foot_velocity_rmse: impact_window_rmse(inp.x_est, inp.x_true, inp.impacts, len),
        iterations: inp.report.iterations,
        stop_reason: inp.report.stop_reason,
        final_model_decrease: inp.report.final_model_decrease(),
        max_direction_norm: inp.report.max_direction_norm,
        wall_time_s: inp.report.wall_time_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_switches() {
        assert_eq!(accuracy(&[0, 1, 1, 2], &[0, 1, 2, 2]), 0.75);
        assert_eq!(switch_count(&[0, 0, 1, 1, 0]), 2);
        assert_eq!(switch_count(&[3]), 0);
    }

    #[test]
    fn window_is_clipped_and_merged() {
        assert_eq!(impact_window(&[2], 30), (0..=12).collect::<Vec<_>>());
        assert_eq!(impact_window(&[25], 30), (15..30).collect::<Vec<_>>());
        assert_eq!(impact_window(&[10, 15], 100).len(), 26);
        assert!(impact_window(&[], 10).is_empty());
    }

    #[test]
    fn rmse_of_constant_offset() {
        let truth = vec![DVector::zeros(4); 5];
        let est = vec![DVector::from_vec(vec![1.0, -2.0, 0.0, 0.5]); 5];
        assert_eq!(rmse(&est, &truth, 5), [1.0, 2.0, 0.0, 0.5]);
        assert_eq!(impact_window_rmse(&est, &truth, &[2], 5), Some(0.5));
        assert_eq!(impact_window_rmse(&est, &truth, &[], 5), None);
    }
}

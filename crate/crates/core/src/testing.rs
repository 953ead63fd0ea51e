//! Small random switched systems and problem instances for property checks.
//!
//! Used by the unit tests, the acceptance suite and the `selfcheck` command.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{EstimationProblem, EstimatorSettings, ModeWeights, SwitchedSystem};

/// `F_m(x) = A_m x + b_m + a·(v_m ⊙ sin x)`, `H(x) = C x + a·sin(C x)`.
#[derive(Debug, Clone)]
pub struct RandomSystem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    c: DMatrix<f64>,
    amplitude: f64,
}

impl RandomSystem {
    pub fn random(n: usize, d: usize, modes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
        let a = (0..modes)
            .map(|_| DMatrix::identity(n, n) + mat(n, n, 0.3))
            .collect();
        let b = (0..modes).map(|_| mat(n, 1, 0.5).column(0).into()).collect();
        let v = (0..modes).map(|_| mat(n, 1, 1.0).column(0).into()).collect();
        let c = mat(d, n, 1.0);
        Self {
            a,
            b,
            v,
            c,
            amplitude: 0.1,
        }
    }

    /// Every mode is the identity map; `H` selects the first `d` coordinates.
    pub fn linear_identity(n: usize, d: usize, modes: usize) -> Self {
        Self {
            a: vec![DMatrix::identity(n, n); modes],
            b: vec![DVector::zeros(n); modes],
            v: vec![DVector::zeros(n); modes],
            c: DMatrix::from_fn(d, n, |i, j| if i == j { 1.0 } else { 0.0 }),
            amplitude: 0.0,
        }
    }
}

impl SwitchedSystem for RandomSystem {
    fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    fn num_modes(&self) -> usize {
        self.a.len()
    }

    fn process(&self, m: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.a[m] * x + &self.b[m] + self.v[m].component_mul(&x.map(f64::sin)) * self.amplitude
    }

    fn process_jacobian(&self, m: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let diag = self.v[m].component_mul(&x.map(f64::cos)) * self.amplitude;
        &self.a[m] + DMatrix::from_diagonal(&diag)
    }

    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        let cx = &self.c * x;
        &cx + cx.map(f64::sin) * self.amplitude
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let cx = &self.c * x;
        let scale = cx.map(|v| 1.0 + self.amplitude * v.cos());
        DMatrix::from_diagonal(&scale) * &self.c
    }
}

/// A random problem together with a random evaluation point.
pub struct RandomInstance {
    pub problem: EstimationProblem,
    pub x: Vec<DVector<f64>>,
    pub w: ModeWeights,
}

/// Random SPD matrix with eigenvalues roughly in `[lo, lo + 1]`.
pub fn random_spd(n: usize, lo: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&b * b.transpose()) / n as f64 + DMatrix::identity(n, n) * lo
}

pub fn random_trajectory(len: usize, n: usize, scale: f64, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    (0..len)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-scale..scale)))
        .collect()
}

/// Random strictly-interior simplex weights.
pub fn random_weights(horizon: usize, modes: usize, rng: &mut impl Rng) -> ModeWeights {
    let rows: Vec<Vec<f64>> = (0..horizon)
        .map(|_| {
            let raw: Vec<f64> = (0..modes).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    ModeWeights::from_rows(&rows)
}

pub fn random_instance(
    horizon: usize,
    n: usize,
    d: usize,
    modes: usize,
    settings: EstimatorSettings,
    seed: u64,
) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1234);
    let sys = Arc::new(RandomSystem::random(n, d, modes, seed));
    let measurements = random_trajectory(horizon, d, 1.0, &mut rng);
    let q = random_spd(n, 0.2, &mut rng);
    let r = random_spd(d, 0.2, &mut rng);
    let problem = EstimationProblem::new(sys, measurements, q, r, settings)
        .expect("random instance is valid");
    let x = random_trajectory(horizon + 1, n, 1.0, &mut rng);
    let w = random_weights(horizon, modes, &mut rng);
    RandomInstance { problem, x, w }
}

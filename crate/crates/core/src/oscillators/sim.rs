use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mode, Contact, HopperParams, MeasurementModel, ModeSpec, LINEAR_MODES, NONLINEAR_MODES};
use crate::error::{Error, Result};

/// Guard predicates, evaluated on the post-step state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    /// Foot reached the ground: `q2 < 0`, or `q2 ≤ 0` while still descending.
    Landed,
    /// The spring of the source mode would accelerate the foot upward.
    Liftoff,
    HipUp,
    HipDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guard {
    pub target: usize,
    pub all_of: &'static [Predicate],
}

const fn guard(target: usize, all_of: &'static [Predicate]) -> Guard {
    Guard { target, all_of }
}

use Predicate::*;

const LINEAR_GUARDS: [&[Guard]; 4] = [
    &[guard(mode::G_UP, &[Landed, HipUp]), guard(mode::G_DOWN, &[Landed]), guard(mode::A_UP, &[HipUp])],
    &[guard(mode::A_UP, &[Liftoff, HipUp]), guard(mode::A_DOWN, &[Liftoff]), guard(mode::G_UP, &[HipUp])],
    &[guard(mode::A_DOWN, &[Liftoff, HipDown]), guard(mode::A_UP, &[Liftoff]), guard(mode::G_DOWN, &[HipDown])],
    &[guard(mode::G_DOWN, &[Landed, HipDown]), guard(mode::G_UP, &[Landed]), guard(mode::A_DOWN, &[HipDown])],
];

const NONLINEAR_GUARDS: [&[Guard]; 2] = [&[guard(mode::GROUND, &[Landed])], &[guard(mode::AIR, &[Liftoff])]];

/// Modes, guards and resets of a hopper. Guards of the current mode are
/// tried in order after each Euler step; the first satisfied one fires.
#[derive(Debug, Clone)]
pub struct HybridAutomaton {
    pub params: HopperParams,
    pub modes: Vec<ModeSpec>,
    pub guards: Vec<Vec<Guard>>,
}

impl HybridAutomaton {
    pub fn linear(params: HopperParams) -> Self {
        Self {
            params,
            modes: LINEAR_MODES.to_vec(),
            guards: LINEAR_GUARDS.iter().map(|g| g.to_vec()).collect(),
        }
    }

    pub fn nonlinear(params: HopperParams) -> Self {
        Self {
            params,
            modes: NONLINEAR_MODES.to_vec(),
            guards: NONLINEAR_GUARDS.iter().map(|g| g.to_vec()).collect(),
        }
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    fn holds(&self, p: Predicate, source: usize, x: &[f64; 4]) -> bool {
        match p {
            Landed => x[1] < 0.0 || (x[1] <= 0.0 && x[3] < 0.0),
            Liftoff => self.modes[source].free_foot_acceleration([x[0], x[1]], &self.params) >= 0.0,
            HipUp => x[2] >= 0.0,
            HipDown => x[2] < 0.0,
        }
    }

    /// First satisfied guard of `source` at `x`.
    pub fn fire(&self, source: usize, x: &[f64; 4]) -> Option<usize> {
        self.guards[source]
            .iter()
            .find(|g| g.all_of.iter().all(|&p| self.holds(p, source, x)))
            .map(|g| g.target)
    }

    /// Reset map for the transition `from → to`. Landing pins the foot to
    /// the ground and absorbs its velocity; everything else is the identity.
    pub fn reset(&self, from: usize, to: usize, x: &mut [f64; 4]) {
        if self.modes[from].contact == Contact::Air && self.modes[to].contact == Contact::Ground {
            x[1] = 0.0;
            x[3] = 0.0;
        }
    }

    /// Euler step of mode `m` on the full state.
    pub fn flow(&self, m: usize, x: &[f64; 4]) -> [f64; 4] {
        let a = self.modes[m].acceleration([x[0], x[1]], &self.params);
        let dt = self.params.dt;
        [x[0] + dt * x[2], x[1] + dt * x[3], x[2] + dt * a[0], x[3] + dt * a[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSettings {
    pub x_init: [f64; 4],
    pub mode_init: usize,
    pub horizon: usize,
    pub measurement: MeasurementModel,
    pub meas_noise_std: f64,
    pub process_noise_std: f64,
    pub seed: u64,
}

/// Ground-truth hybrid trajectory with its measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    /// `x[0..=T]`
    pub x: Vec<DVector<f64>>,
    /// Mode active on the step `t → t+1`, `t = 0..T`.
    pub modes: Vec<usize>,
    /// `y[0..T]`
    pub y: Vec<DVector<f64>>,
    /// Samples `t` at which a guard fired (the new mode starts at `t`).
    pub switches: Vec<usize>,
    /// Subset of `switches` that are air-to-ground impacts.
    pub impacts: Vec<usize>,
    pub seed: u64,
}

pub fn simulate(automaton: &HybridAutomaton, s: &SimulationSettings) -> Result<SimRecord> {
    automaton.params.validate()?;
    if s.mode_init >= automaton.num_modes() {
        return Err(Error::InitialStateOutsideDomain(format!("mode {} does not exist", s.mode_init)));
    }
    if s.x_init.iter().any(|v| !v.is_finite()) || !automaton.modes[s.mode_init].contains(&s.x_init, 1e-9) {
        return Err(Error::InitialStateOutsideDomain(format!(
            "{:?} is not in the domain of {}",
            s.x_init, automaton.modes[s.mode_init].name
        )));
    }
    for (name, v) in [("meas_noise_std", s.meas_noise_std), ("process_noise_std", s.process_noise_std)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::BadHyperparameter(format!("{name} must be non-negative, got {v}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let process_noise = Normal::new(0.0, s.process_noise_std).expect("validated std");
    let meas_noise = Normal::new(0.0, s.meas_noise_std).expect("validated std");

    let mut xs = Vec::with_capacity(s.horizon + 1);
    let mut modes = Vec::with_capacity(s.horizon);
    let mut switches = Vec::new();
    let mut impacts = Vec::new();
    let mut x = s.x_init;
    let mut m = s.mode_init;
    xs.push(x);
    for t in 0..s.horizon {
        modes.push(m);
        let mut next = automaton.flow(m, &x);
        if s.process_noise_std > 0.0 {
            let ground = automaton.modes[m].contact == Contact::Ground;
            for (i, v) in next.iter_mut().enumerate() {
                if ground && (i == 1 || i == 3) {
                    continue;
                }
                *v += process_noise.sample(&mut rng);
            }
        }
        if let Some(target) = automaton.fire(m, &next) {
            automaton.reset(m, target, &mut next);
            if automaton.modes[m].contact == Contact::Air && automaton.modes[target].contact == Contact::Ground {
                impacts.push(t + 1);
            }
            switches.push(t + 1);
            m = target;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(t + 1));
        }
        if next[1] < 0.0 {
            // Only reachable through process noise on an air mode with no
            // landing guard; keep the foot out of the ground.
            if !automaton.modes[m].contains(&[next[0], 0.0, next[2], next[3]], 1e-9) {
                return Err(Error::NoValidMode(t + 1));
            }
            next[1] = 0.0;
        }
        x = next;
        xs.push(x);
    }

    let xs: Vec<DVector<f64>> = xs.iter().map(|v| DVector::from_column_slice(v)).collect();
    let y = xs[..s.horizon]
        .iter()
        .map(|x| {
            let mut y = s.measurement.apply(x);
            if s.meas_noise_std > 0.0 {
                y.iter_mut().for_each(|v| *v += meas_noise.sample(&mut rng));
            }
            y
        })
        .collect();

    Ok(SimRecord {
        x: xs,
        modes,
        y,
        switches,
        impacts,
        seed: s.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(horizon: usize) -> SimulationSettings {
        SimulationSettings {
            x_init: [1.0, 0.5, 0.0, 0.0],
            mode_init: mode::A_DOWN,
            horizon,
            measurement: MeasurementModel::Position,
            meas_noise_std: 0.01,
            process_noise_std: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn landing_resets_foot_velocity() {
        let a = HybridAutomaton::linear(HopperParams::linear());
        let rec = simulate(&a, &settings(2000)).unwrap();
        assert!(!rec.impacts.is_empty());
        let t = rec.impacts[0];
        assert_eq!(rec.modes[t - 1], mode::A_DOWN);
        assert_eq!(rec.modes[t], mode::G_DOWN);
        assert_eq!(rec.x[t][3], 0.0);
        assert_eq!(rec.x[t][1], 0.0);
        assert!(rec.x[t - 1][3] < 0.0);
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let a = HybridAutomaton::linear(HopperParams::linear());
        for meas in [MeasurementModel::Position, MeasurementModel::Relative] {
            let s = SimulationSettings { meas_noise_std: 0.0, measurement: meas, ..settings(300) };
            let rec = simulate(&a, &s).unwrap();
            for (x, y) in rec.x.iter().zip(&rec.y) {
                assert_eq!(&meas.apply(x), y);
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = HybridAutomaton::nonlinear(HopperParams::nonlinear());
        let s = SimulationSettings { process_noise_std: 1e-3, mode_init: mode::AIR, ..settings(800) };
        let r1 = simulate(&a, &s).unwrap();
        let r2 = simulate(&a, &s).unwrap();
        assert_eq!(r1, r2);
        let r3 = simulate(&a, &SimulationSettings { seed: 4, ..s }).unwrap();
        assert_ne!(r1.y, r3.y);
    }

    #[test]
    fn rejects_initial_state_outside_domain() {
        let a = HybridAutomaton::linear(HopperParams::linear());
        let s = SimulationSettings { mode_init: mode::G_DOWN, ..settings(10) };
        assert!(matches!(simulate(&a, &s), Err(Error::InitialStateOutsideDomain(_))));
        let s = SimulationSettings { x_init: [1.0, -0.1, 0.0, 0.0], ..settings(10) };
        assert!(matches!(simulate(&a, &s), Err(Error::InitialStateOutsideDomain(_))));
    }

    #[test]
    fn invariants_hold_along_trajectories() {
        for (a, mode_init) in [
            (HybridAutomaton::linear(HopperParams::linear()), mode::A_DOWN),
            (HybridAutomaton::nonlinear(HopperParams::nonlinear()), mode::AIR),
        ] {
            let rec = simulate(&a, &SimulationSettings { mode_init, ..settings(2000) }).unwrap();
            assert!(rec.impacts.len() >= 2, "impacts: {:?}", rec.impacts);
            for (t, x) in rec.x.iter().enumerate().take(2000) {
                let xa = [x[0], x[1], x[2], x[3]];
                assert!(x[1] >= -1e-12);
                assert!(a.modes[rec.modes[t]].contains(&xa, 1e-9), "t = {t}, mode {}", rec.modes[t]);
                if t >= 1 && a.num_modes() == 4 {
                    let up = matches!(rec.modes[t], mode::A_UP | mode::G_UP);
                    assert_eq!(up, x[2] >= 0.0, "t = {t}");
                }
            }
            for w in rec.modes.windows(2).enumerate() {
                if w.1[0] != w.1[1] {
                    assert!(rec.switches.contains(&(w.0 + 1)));
                }
            }
        }
    }
}

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybrid_vp::error::CovarianceRole;
use hybrid_vp::gauss_newton::{estimate, EstimateOptions};
use hybrid_vp::harness::io::{parse_trajectory_csv, trajectory_csv, TrajectoryRow};
use hybrid_vp::harness::ScenarioConfig;
use hybrid_vp::inner::{project_simplex, solve_w, WSubproblem};
use hybrid_vp::model::{Covariance, EstimationProblem, EstimatorSettings, InnerSettings, ModeWeights, ProcessPenalty};
use hybrid_vp::objective::{full_objective, CompositeSplit, PenaltyTerms};
use hybrid_vp::oscillators::{mode, simulate, HopperParams, HybridAutomaton, MeasurementModel, SimulationSettings};
use hybrid_vp::testing::{random_instance, random_spd, random_weights, RandomSystem};
use hybrid_vp::SwitchedSystem;

fn simplex_row(modes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, modes).prop_map(|v| project_simplex(&v))
}

fn settings(nu: f64, beta: f64, penalty: ProcessPenalty) -> EstimatorSettings {
    EstimatorSettings { nu, beta, penalty, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_on_simplex_and_is_optimal(v in prop::collection::vec(-5.0f64..5.0, 1..7)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // Variational inequality ⟨v − p, q − p⟩ ≤ 0 against simplex vertices.
        for j in 0..v.len() {
            let ip: f64 = (0..v.len())
                .map(|i| (v[i] - p[i]) * (if i == j { 1.0 } else { 0.0 } - p[i]))
                .sum();
            prop_assert!(ip <= 1e-10, "vertex {j}: {ip}");
        }
        let again = project_simplex(&p);
        prop_assert!(again.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-15));
    }

    #[test]
    fn inverse_square_root_reconstructs_inverse(seed in any::<u64>(), n in 1usize..6, diagonal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = random_spd(n, 0.1, &mut rng);
        if diagonal {
            m = DMatrix::from_diagonal(&m.diagonal());
        }
        let c = Covariance::new(m.clone(), CovarianceRole::Process).unwrap();
        let inv = m.try_inverse().unwrap();
        let rebuilt = c.inv_sqrt().transpose() * c.inv_sqrt();
        prop_assert!((&rebuilt - &inv).norm() / inv.norm() <= 1e-10);
    }

    #[test]
    fn objective_is_nonnegative(seed in any::<u64>(), modes in 1usize..4, nu in 0.0f64..2.0, dof in 0.01f64..5.0) {
        let inst = random_instance(5, 2, 1, modes, settings(nu, 1e-3, ProcessPenalty::StudentT { dof }), seed);
        prop_assert!(full_objective(&inst.x, &inst.w, &inst.problem, true).unwrap() >= 0.0);
        let g = inst.problem.with_settings(settings(nu, 1e-3, ProcessPenalty::Gaussian)).unwrap();
        prop_assert!(full_objective(&inst.x, &inst.w, &g, true).unwrap() >= 0.0);
    }

    #[test]
    fn objective_vanishes_on_exact_data(seed in any::<u64>(), modes in 1usize..4, dof in 0.01f64..5.0) {
        let horizon = 6;
        let sys = Arc::new(RandomSystem::random(2, 1, modes, seed));
        let m = (seed % modes as u64) as usize;
        let mut x = vec![DVector::from_vec(vec![0.3, -0.2])];
        for t in 0..horizon {
            let next = sys.process(m, &x[t]);
            x.push(next);
        }
        let y: Vec<_> = x[..horizon].iter().map(|xt| sys.measure(xt)).collect();
        let s = settings(0.7, 1e-4, ProcessPenalty::StudentT { dof });
        let p = EstimationProblem::new(sys, y, DMatrix::identity(2, 2), DMatrix::identity(1, 1), s).unwrap();
        let w = ModeWeights::from_modes(&vec![m; horizon], modes);
        prop_assert!(full_objective(&x, &w, &p, false).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn objective_is_affine_in_weights_without_smoothing(
        seed in any::<u64>(),
        modes in 2usize..5,
        alpha in 0.0f64..=1.0,
    ) {
        let s = settings(0.0, 1e-4, ProcessPenalty::StudentT { dof: 0.5 });
        let inst = random_instance(5, 2, 1, modes, s, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let u = random_weights(5, modes, &mut rng);
        let v = random_weights(5, modes, &mut rng);
        let mix = ModeWeights::from_rows(
            &(0..5)
                .map(|t| u.row(t).iter().zip(v.row(t)).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        let f = |w: &ModeWeights| full_objective(&inst.x, w, &inst.problem, false).unwrap();
        let lhs = f(&mix);
        let rhs = alpha * f(&u) + (1.0 - alpha) * f(&v);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn composite_split_matches_objective_at_inner_solution(seed in any::<u64>(), modes in 1usize..4) {
        let inst = random_instance(6, 2, 2, modes, EstimatorSettings::default(), seed);
        let sol = solve_w(&inst.x, &inst.problem, &inst.w).unwrap();
        let w = sol.w();
        let terms = PenaltyTerms::evaluate(&inst.problem, &inst.x, false).unwrap();
        let split = CompositeSplit::new(&terms, w, &inst.problem).value(inst.problem.r());
        let beta = inst.problem.settings().beta;
        let direct = full_objective(&inst.x, w, &inst.problem, false).unwrap() + 0.5 * beta * w.norm_squared();
        prop_assert!((split - direct).abs() <= 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn inner_solution_is_unique_feasible_and_improves(
        seed in any::<u64>(),
        modes in 2usize..5,
        rows in prop::collection::vec(simplex_row(4), 8),
    ) {
        let tight = EstimatorSettings { inner: InnerSettings { max_iters: 500_000, tol: 1e-13 }, ..Default::default() };
        let inst = random_instance(8, 2, 1, modes, tight, seed);
        let start = ModeWeights::from_rows(&rows.iter().map(|r| project_simplex(&r[..modes])).collect::<Vec<_>>());
        let terms = PenaltyTerms::evaluate(&inst.problem, &inst.x, false).unwrap();
        let sub = WSubproblem::from_terms(&terms, &inst.problem);
        let settings = inst.problem.settings().inner;
        let a = sub.solve(&start, &settings);
        let b = sub.solve(&inst.w, &settings);
        let gap = a.w.as_slice().iter().zip(b.w.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-8, "gap {gap}");
        prop_assert!(a.w.first_infeasible(1e-12).is_none());
        prop_assert!(a.objective <= sub.value(start.as_slice()) + 1e-12);
    }

    #[test]
    fn trajectory_csv_round_trips(
        rows in prop::collection::vec(
            (
                prop::array::uniform4(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL),
                prop::array::uniform2(-1e3f64..1e3),
                0usize..4,
                simplex_row(3),
            ),
            1..20,
        ),
    ) {
        let rows: Vec<TrajectoryRow> = rows
            .into_iter()
            .enumerate()
            .map(|(t, (x, y, m, w))| TrajectoryRow {
                t,
                time: t as f64 * 0.01,
                x_true: x,
                mode_true: m,
                y,
                x_est: [x[3], x[2], x[1], x[0]],
                mode_est: 3 - m,
                w_tilde: w,
            })
            .collect();
        let text = trajectory_csv(&rows, 3);
        let back = parse_trajectory_csv(&text).unwrap();
        prop_assert_eq!(&back, &rows);
        prop_assert_eq!(trajectory_csv(&back, 3), text);
    }

    #[test]
    fn scenario_config_round_trips(
        seed in any::<u64>(),
        horizon in 2usize..5000,
        noise in 0.0f64..1.0,
        nu in 0.0f64..10.0,
        relative in any::<bool>(),
        known in any::<bool>(),
    ) {
        let mut c = ScenarioConfig { seed, horizon, meas_noise_std: noise, known_modes: known, ..Default::default() };
        c.estimator.nu = nu;
        if relative {
            c.measurement = MeasurementModel::Relative;
        }
        let back = ScenarioConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_simulation_invariants(
        seed in any::<u64>(),
        q1 in 0.2f64..2.0,
        q2 in 0.0f64..1.0,
        v1 in -1.0f64..1.0,
        v2 in -1.0f64..1.0,
        process_noise in prop_oneof![Just(0.0), 0.0f64..0.05],
    ) {
        let automaton = HybridAutomaton::linear(HopperParams::linear());
        let mode_init = if v1 >= 0.0 { mode::A_UP } else { mode::A_DOWN };
        let s = SimulationSettings {
            x_init: [q1, q2, v1, v2],
            mode_init,
            horizon: 600,
            measurement: MeasurementModel::Position,
            meas_noise_std: 0.01,
            process_noise_std: process_noise,
            seed,
        };
        let rec = simulate(&automaton, &s).unwrap();
        prop_assert_eq!(&rec, &simulate(&automaton, &s).unwrap());
        for (t, x) in rec.x.iter().enumerate().take(rec.modes.len()) {
            prop_assert!(x[1] >= -1e-12);
            let xa = [x[0], x[1], x[2], x[3]];
            prop_assert!(automaton.modes[rec.modes[t]].contains(&xa, 1e-9), "t = {}", t);
            if t >= 1 {
                let up = matches!(rec.modes[t], mode::A_UP | mode::G_UP);
                prop_assert_eq!(up, x[2] >= 0.0, "t = {}", t);
            }
        }
        for &t in &rec.impacts {
            prop_assert_eq!(rec.x[t][3], 0.0);
        }
    }

    #[test]
    fn estimator_descends_with_positive_definite_curvature(seed in any::<u64>(), modes in 2usize..4) {
        let inst = random_instance(5, 2, 1, modes, EstimatorSettings::default(), seed);
        let options = EstimateOptions { track_curvature: true, ..Default::default() };
        let (_, report) = estimate(&inst.problem, &inst.x, None, &options).unwrap();
        prop_assert!(report.objective_trace.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(report.model_decrease.iter().all(|&d| d <= 0.0));
        prop_assert!(report.min_curvature_eigenvalues.iter().all(|&l| l > 0.0));
        prop_assert!(report.max_direction_norm < 1e6);
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybrid_vp::harness::{self, run_ablation, run_scenario, AblationName, ScenarioConfig};
use hybrid_vp::model::{jacobian_selfcheck, EstimatorSettings, SwitchedSystem};
use hybrid_vp::oscillators::{linear_hopper, nonlinear_hopper, HopperParams, MeasurementModel};
use hybrid_vp::{gauss_newton, inner, linalg, testing, StopReason};

#[derive(Parser)]
#[command(name = "hybrid-vp", version, about = "Hybrid-system state estimation by variable projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, estimate and write trajectory.csv, convergence.csv, report.json and config.json.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate only and write trajectory.csv with the truth in the estimate columns.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a paired comparison: students_t, gauss_newton, smoothing, onboard or nonlinear.
    Ablation {
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Base config the pairs are derived from.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Jacobian, gradient and curvature property checks.
    Selfcheck,
}

fn load(path: &PathBuf, out: Option<PathBuf>) -> hybrid_vp::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> hybrid_vp::Result<bool> {
    match cli.command {
        Command::Estimate { config, out } => {
            let cfg = load(&config, out)?;
            let o = run_scenario(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&o.metrics)?);
            if let Some(dir) = &cfg.output_dir {
                println!("artifacts written to {}", dir.display());
            }
            Ok(o.metrics.stop_reason == StopReason::Converged)
        }
        Command::Simulate { config, out } => {
            let cfg = load(&config, out)?;
            let (record, system) = harness::simulate_scenario(&cfg)?;
            let csv = harness::simulation_csv(&cfg, &record, system.num_modes());
            match &cfg.output_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("trajectory.csv"), csv)?;
                    harness::io::write_json(&dir.join("config.json"), &cfg)?;
                    println!("{} samples, {} impacts -> {}", record.modes.len(), record.impacts.len(), dir.display());
                }
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Ablation { name, out, config } => {
            let name: AblationName = name.parse()?;
            let base = match config {
                Some(p) => ScenarioConfig::load(&p)?,
                None => ScenarioConfig::default(),
            };
            let table = run_ablation(name, &base, Some(&out))?;
            for c in &table.checks {
                println!("{} {}", if c.pass { "PASS" } else { "FAIL" }, c.description);
            }
            Ok(table.passed())
        }
        Command::Selfcheck => selfcheck(),
    }
}

fn report(ok: bool, what: &str) -> bool {
    println!("{} {what}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn selfcheck() -> hybrid_vp::Result<bool> {
    let mut all = true;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let systems = [
        ("linear", linear_hopper(HopperParams::linear(), MeasurementModel::Position).1),
        ("nonlinear", nonlinear_hopper(HopperParams::nonlinear(), MeasurementModel::Relative).1),
    ];
    for (label, sys) in &systems {
        let mut worst: f64 = 0.0;
        let mut ok = true;
        let mut n = 0;
        while n < 100 {
            let x: DVector<f64> = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            if (x[0] - x[1]).abs() >= 0.99 && label == &"nonlinear" {
                continue;
            }
            for c in jacobian_selfcheck(sys, &x, 1e-5)? {
                worst = worst.max(c.relative_error);
                ok &= c.pass;
            }
            n += 1;
        }
        all &= report(ok, &format!("{label} hopper Jacobians at 100 random states (worst {worst:.2e})"));
    }

    let settings = EstimatorSettings {
        inner: hybrid_vp::model::InnerSettings { tol: 1e-10, ..Default::default() },
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = testing::random_instance(10, 2, 1, 2, settings, seed);
        let vg = inner::value_and_grad(&inst.x, &inst.problem, &inst.w)?;
        let h = 1e-6;
        let mut fd = Vec::new();
        for t in 0..inst.x.len() {
            for i in 0..2 {
                let mut xp = inst.x.clone();
                xp[t][i] += h;
                let mut xm = inst.x.clone();
                xm[t][i] -= h;
                let vp = inner::solve_w(&xp, &inst.problem, vg.w())?.value;
                let vm = inner::solve_w(&xm, &inst.problem, vg.w())?.value;
                fd.push((vp - vm) / (2.0 * h));
            }
        }
        let g = linalg::flatten(&vg.gradient);
        let fd = DVector::from_vec(fd);
        worst = worst.max((&g - &fd).norm() / g.norm().max(1e-12));
    }
    all &= report(worst < 1e-4, &format!("value-function gradient vs central differences (worst {worst:.2e})"));

    let mut min_eig = f64::INFINITY;
    for seed in 0..50 {
        let inst = testing::random_instance(3, 2, 1, 2, EstimatorSettings::default(), 100 + seed);
        let u = gauss_newton::assemble_u(&inst.x, &inst.w, &inst.problem)?;
        min_eig = min_eig.min(gauss_newton::min_eigenvalue(&u.to_dense()));
    }
    all &= report(min_eig > 0.0, &format!("curvature positive definite on 50 instances (min eigenvalue {min_eig:.2e})"));
    Ok(all)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

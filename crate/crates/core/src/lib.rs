//! State estimation for switched systems: joint recovery of continuous
//! trajectories and discrete modes by variable projection over a relaxed
//! mode assignment, with Student's-t process penalties and Gauss-Newton
//! outer steps.

pub mod error;
pub mod gauss_newton;
pub mod harness;
pub mod inner;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod oscillators;
pub mod testing;

pub use error::{Error, Result};
pub use gauss_newton::{estimate, ConvergenceReport, DirectionMode, EstimateOptions, StopReason};
pub use model::{
    EstimationProblem, EstimatorSettings, ModeWeights, ProcessPenalty, SwitchedSystem, TrajectoryEstimate,
};

//! Parameter estimation for ODE models from high-frequency observations:
//! sensitivities, data modification schemes, stochastic and Kalman-type
//! gradient methods, and the experiment harness built on them.

pub mod check;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod integrate;
pub mod io;
pub mod modify;
pub mod observe;
pub mod optimize;
pub mod rng;
pub mod scalar;
pub mod stochastic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ModelSpecF64 = dynamics::ModelSpec<f64>;
pub type ProblemF64 = observe::Problem<f64>;
pub type ObservationSetF64 = observe::ObservationSet<f64>;
pub type RunTraceF64 = optimize::RunTrace<f64>;
pub type ModelSpecF32 = dynamics::ModelSpec<f32>;
pub type ProblemF32 = observe::Problem<f32>;

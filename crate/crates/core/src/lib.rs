//! Fixed-point Kalman filtering on energy-scalable unreliable memory.
//!
//! The filter state estimate is stored in sign-magnitude fixed point in
//! memory banks whose bit-flip probability falls exponentially with the
//! energy spent on them. The crate provides
//!
//! - exact fixed-point arithmetic ([`fixedpoint`]),
//! - the bank energy / bit-flip model ([`memory_model`]),
//! - the ideal filter and its offline gain schedule ([`kalman`]),
//! - an analytic recursion for the total error covariance ([`error_theory`]),
//! - energy allocation under an estimation-accuracy constraint
//!   ([`energy_optimizer`]),
//! - seeded fault-injection Monte Carlo ([`montecarlo`]),
//! - and the experiment driver behind the `qkalman` binary ([`cli`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod energy_optimizer;
pub mod error;
pub mod error_theory;
pub mod fixedpoint;
pub mod kalman;
pub mod memory_model;
pub mod montecarlo;
pub mod scalar;
pub mod scenario;

pub use error::{Error, Result};
pub use fixedpoint::{FixedPointFormat, FixedPointValue};
pub use scalar::Scalar;

pub type StateSpaceModel = kalman::StateSpaceModel<f64>;
pub type GainSchedule = kalman::GainSchedule<f64>;
pub type EnergyVector = memory_model::EnergyVector<f64>;
pub type MemoryNoiseParams = memory_model::MemoryNoiseParams<f64>;
pub type QuantizedMatrix = fixedpoint::QuantizedMatrix<f64>;
pub type ErrorCovariance = error_theory::ErrorCovariance<f64>;
pub type ErrorResponse = error_theory::ErrorResponse<f64>;
pub type NoiseBudget = error_theory::NoiseBudget<f64>;
pub type Scenario = scenario::Scenario<f64>;
pub type PerformanceConstraint = energy_optimizer::PerformanceConstraint<f64>;
pub type EnergyProblem = energy_optimizer::EnergyProblem<f64>;
pub type BitwiseSolution = energy_optimizer::BitwiseSolution<f64>;
pub type LevelSolution = energy_optimizer::LevelSolution<f64>;
pub type TrialConfig = montecarlo::TrialConfig<f64>;
pub type EmpiricalCovariance = montecarlo::EmpiricalCovariance<f64>;

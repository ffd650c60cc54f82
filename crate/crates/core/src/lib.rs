//! Online system identification with experience replay and critic-only
//! integral reinforcement learning for saturated optimal tracking.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod critic;
pub mod error;
pub mod experiment;
pub mod identifier;
pub mod linalg;
pub mod models;
pub mod ode;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
pub use models::{ParameterSchedule, PlantParams, PlantState};
pub use sim::{run, run_collect, Metrics, SimConfig, StepRecord};

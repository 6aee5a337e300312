//! Exponential integrators for stochastic differential equations with
//! linear multiplicative noise, built on the geometric Brownian motion
//! propagator.

pub mod error;
pub mod harness;
pub mod mat;
pub mod matexp;
pub mod model;
pub mod noise;
pub mod schemes;

pub use error::{Error, Result};
pub use harness::{ErrorTable, ExperimentConfig, MomentTrajectory, Reference};
pub use mat::Mat;
pub use model::{ProblemBuilder, SdeProblem, Trajectory};
pub use noise::{GridSpec, NoiseBatch, NoiseLevel};
pub use schemes::{SchemeKind, SchemeSpec, Stepper};

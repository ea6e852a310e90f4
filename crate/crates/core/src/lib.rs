//! Standard and multilevel Monte Carlo estimation for vertical particle
//! dispersion in a turbulent atmospheric boundary layer.

pub mod cli;
pub mod coupling;
pub mod error;
pub mod estimators;
pub mod integrators;
pub mod model;
pub mod qoi;

pub use error::{Error, Result};
pub use integrators::{Integrator, ParticleState, Sign, StepRecord};
pub use model::ModelParams;
pub use qoi::{Qoi, QoISpec};
pub use coupling::{NoiseStream, PathSetup};

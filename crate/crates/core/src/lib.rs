//! Numerical laboratory for temporal alignment guidance in diffusion
//! sampling.
//!
//! The crate pairs an analytic Gaussian-mixture oracle (exact densities,
//! scores, timestep posteriors, and time-linked scores) with small trained
//! models (an ε-prediction score network and a timestep classifier), reverse
//! samplers that apply the timestep-posterior gradient as a corrective
//! guidance term, training-free conditional guidance with multi-condition
//! reparameterizations, and the metrics used to evaluate all of it
//! (time gap, sliced Wasserstein-1, mixture NLL).
//!
//! Modules:
//! - [`schedule`]: VP forward-process coefficients and guidance strengths
//! - [`mixture`]: the analytic oracle
//! - [`net`]: MLPs, exact backprop, Adam, the two training loops
//! - [`sampler`]: DDPM/DDIM reverse processes, drift/corruption variants,
//!   guided sampling, Langevin correctors and escape times
//! - [`guidance`]: conditional guidance and multi-condition samplers
//! - [`metrics`]: evaluation metrics and run summaries
//! - [`verify`]: the named identity checks with machine-readable reports

pub mod error;
pub mod guidance;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use mixture::{GaussianMixture, MarginalFamily, TimePosterior};
pub use net::{Activation, Mlp, TrainConfig};
pub use rng::Rng;
pub use sampler::{ScoreSource, TlsSource, Trajectory, TrajectorySet};
pub use schedule::{NoiseSchedule, OmegaKind};

//! Moment estimation for nonlinear transformations of standard-normal inputs and
//! shrinking-horizon stochastic NMPC built on top of it.
//!
//! The estimator combines a Gaussian process with a truncated Hermite polynomial
//! chaos mean function. Expectations of the kernel against the input measure have
//! closed forms, so the mean and variance of a transformed random variable can be
//! read off from a handful of precomputed matrices and a single vector of function
//! evaluations on a deterministic design. The same machinery tightens chance
//! constraints inside a receding-horizon controller for a semi-batch polymerization
//! reactor with uncertain kinetic and heat-transfer parameters.

pub mod bundle;
pub mod config;
pub mod error;
pub mod gp;
pub mod gppce;
pub mod mc;
pub mod nlp;
pub mod pce;
pub mod reactor;
pub mod sampling;
pub mod snmpc;

pub use error::{Error, Result};
pub use gp::{GpModel, KernelParams};
pub use gppce::{GppceConfig, GppcePrecompute, MomentEstimate};
pub use pce::PceBasis;
pub use reactor::{ControlInput, PlantConstants, ReactorState, UncertainParams};
pub use sampling::{SampleDesign, Scheme};
pub use snmpc::{OcpSolution, OcpSpec};

pub use config::RunConfig;

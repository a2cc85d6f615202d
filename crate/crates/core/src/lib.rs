//! Samplers for unnormalized discrete densities built on the reverse of a
//! uniform-noise continuous-time Markov chain.
//!
//! The concrete score that drives the reverse chain can come from exact
//! enumeration ([`oracle`]), from Monte-Carlo estimation through the target
//! concrete score identity ([`estimator`]), or from a trained network
//! ([`neural`], [`training`]). [`sampler`] simulates the reverse chain,
//! [`mcmc`] provides Glauber and Gibbs-with-gradients baselines, and
//! [`metrics`] computes lattice statistics for comparing sample sets.

pub mod energy;
pub mod error;
pub mod estimator;
pub mod kernel;
pub mod math;
pub mod mcmc;
pub mod metrics;
pub mod neural;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod training;

pub use energy::{EnergyModel, IsingModel, SequenceState};
pub use error::{Error, Result};
pub use kernel::NoiseSchedule;
pub use score::ConcreteScoreMatrix;

//! Emulator-accelerated Bayesian calibration of slow dynamic simulators.
//!
//! The simulator is replaced by a mechanistic Gaussian-process emulator whose
//! prior is a single linear reservoir. Design runs are placed with a Halton
//! sequence and refined in batches toward the posterior, which is sampled with
//! an affine-invariant ensemble MCMC.
//!
//! Module map:
//!
//! * [`design`]: parameter spaces, Halton designs, stretching, design sets.
//! * [`prior_model`]: the linear reservoir and its auxiliary parameters.
//! * [`emulator`]: coupled replicas, Kalman conditioning, dense oracle.
//! * [`likelihood`]: Box-Cox, bias covariance, log-likelihood, priors.
//! * [`sampler`]: ensemble MCMC with stretch moves.
//! * [`inference`]: calibration problems and posterior samples.
//! * [`refinement`]: cross-match distance and the refinement loop.
//! * [`simulators`]: toy catchment, synthetic observations, external runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod emulator;
pub mod error;
pub mod inference;
pub mod likelihood;
pub mod matching;
pub mod prior_model;
pub mod refinement;
pub mod rng;
pub mod sampler;
pub mod series;
pub mod simulators;

pub use design::{DesignSet, Dimension, Origin, ParameterSpace, ParameterVector};
pub use emulator::{Emulator, EmulatorPrediction};
pub use error::{Error, Result, SimulatorError};
pub use likelihood::{ErrorModelParams, PriorSpec};
pub use prior_model::{AggregateMapping, AuxiliaryParameters, CatchmentAggregates, LinearPriorModel};
pub use series::TimeSeries;
pub use simulators::Simulator;

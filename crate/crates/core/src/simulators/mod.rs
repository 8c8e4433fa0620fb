//! Simulators that produce design outputs and reference posteriors.

pub mod external;
pub mod observation;
pub mod toy;

use crate::error::SimulatorError;
use crate::prior_model::{AuxiliaryParameters, LinearPriorModel};
use crate::series::TimeSeries;

pub use external::ExternalSimulatorSpec;
pub use observation::{make_observation, Observation};
pub use toy::{toy_simulate, ToyCatchment};

/// A deterministic map from a parameter vector to an output series.
///
/// Implementations must be safe to call concurrently with independent inputs.
pub trait Simulator: Send + Sync {
    fn simulate(&self, theta: &[f64]) -> Result<TimeSeries, SimulatorError>;
}

/// The linear prior model used as a simulator, for exactness checks.
#[derive(Debug, Clone)]
pub struct LinearSimulator {
    pub model: LinearPriorModel,
    pub aux: AuxiliaryParameters,
}

impl Simulator for LinearSimulator {
    fn simulate(&self, theta: &[f64]) -> Result<TimeSeries, SimulatorError> {
        self.model
            .simulate(theta, &self.aux)
            .map_err(|e| SimulatorError::Failed {
                message: e.to_string(),
                output: String::new(),
            })
    }
}

impl<S: Simulator + ?Sized> Simulator for &S {
    fn simulate(&self, theta: &[f64]) -> Result<TimeSeries, SimulatorError> {
        (**self).simulate(theta)
    }
}

impl<S: Simulator + ?Sized> Simulator for Box<S> {
    fn simulate(&self, theta: &[f64]) -> Result<TimeSeries, SimulatorError> {
        (**self).simulate(theta)
    }
}

impl<S: Simulator + ?Sized> Simulator for std::sync::Arc<S> {
    fn simulate(&self, theta: &[f64]) -> Result<TimeSeries, SimulatorError> {
        (**self).simulate(theta)
    }
}

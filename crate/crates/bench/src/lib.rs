//! Shared fixtures for the benchmarks.

use mechemu_core::prior_model::AuxEstimation;
use mechemu_core::refinement::{estimate_auxiliary, simulate_batch};
use mechemu_core::simulators::toy::{synthetic_rain, toy_space, ToyCatchment};
use mechemu_core::{AggregateMapping, AuxiliaryParameters, DesignSet, LinearPriorModel, Simulator, TimeSeries};

pub const DT: f64 = 120.0;
pub const STEPS: usize = 150;

pub struct Fixture {
    pub design: DesignSet,
    pub model: LinearPriorModel,
    pub aux: AuxiliaryParameters,
    pub observed: TimeSeries,
    pub query: Vec<f64>,
}

/// Halton design of `n` toy runs in four dimensions.
pub fn fixture(n: usize) -> Fixture {
    let space = toy_space(4).expect("toy space");
    let rain = synthetic_rain(STEPS, DT).expect("rain");
    let toy = ToyCatchment::new(&space, rain.clone()).expect("toy");
    let mapping = AggregateMapping::from_space(toy.aggregates(), &space).expect("mapping");
    let model = LinearPriorModel::new(mapping, rain).expect("model");
    let mut design = DesignSet::halton(space.clone(), 1.05, n, 1).expect("design");
    let outputs = simulate_batch(&toy, design.points())
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .expect("toy runs");
    design.set_outputs(outputs).expect("outputs");
    let aux = estimate_auxiliary(&design, &model, 5.0, &AuxEstimation::default()).expect("aux");
    let query: Vec<f64> = space.dims().iter().map(|d| d.lower + 0.37 * d.span()).collect();
    let observed = toy.simulate(&space.centers()).expect("observation");
    Fixture {
        design,
        model,
        aux,
        observed,
        query,
    }
}

#![allow(dead_code)]

use mechemu_core::design::{Dimension, Origin};
use mechemu_core::prior_model::estimate_sigma;
use mechemu_core::rng::Rng;
use mechemu_core::simulators::toy::{synthetic_rain, toy_space, ToyCatchment};
use mechemu_core::*;
use rand::{Rng as _, SeedableRng};

pub const DT: f64 = 120.0;

pub fn base_aggregates() -> CatchmentAggregates {
    CatchmentAggregates {
        width: 3600.0,
        slope: 0.114,
        roughness: 0.12,
        imperviousness: 0.36,
    }
}

pub fn two_param_space() -> ParameterSpace {
    ParameterSpace::new(vec![
        Dimension::new("impervious_area", 0.5, 1.1),
        Dimension::new("width", 0.5, 1.5),
    ])
    .unwrap()
}

/// Random storm on `nt` steps: a few triangular bursts, in m/s.
pub fn random_rain(nt: usize, rng: &mut Rng) -> TimeSeries {
    let mut values = vec![0.0; nt];
    for _ in 0..rng.random_range(1..=3) {
        let center = rng.random_range(0.0..nt as f64 * 0.7);
        let half = rng.random_range(1.0..(nt as f64 / 3.0).max(2.0));
        let peak = rng.random_range(5.0..30.0) / 3.6e6;
        for (i, v) in values.iter_mut().enumerate() {
            *v += peak * (1.0 - ((i as f64 - center) / half).abs()).max(0.0);
        }
    }
    TimeSeries::new(0.0, DT, values).unwrap()
}

pub struct Instance {
    pub design: DesignSet,
    pub model: LinearPriorModel,
    pub aux: AuxiliaryParameters,
    pub query: Vec<f64>,
}

/// Small emulator problem: `n <= 4` designs, `N_t <= 20`, nonlinear outputs.
pub fn small_instance(seed: u64) -> Instance {
    let mut rng = Rng::seed_from_u64(seed);
    let space = two_param_space();
    let nt = rng.random_range(5..=20);
    let n = rng.random_range(1..=4);
    let rain = random_rain(nt, &mut rng);
    let model = LinearPriorModel::new(AggregateMapping::from_space(base_aggregates(), &space).unwrap(), rain).unwrap();
    let mut aux = AuxiliaryParameters {
        k: 0.009 * rng.random_range(0.3..3.0),
        t0: rng.random_range(0.0..400.0),
        area: 1.1e6,
        gamma: 5.0,
        sigma: 0.0,
    };
    let mut design = DesignSet::new(space.clone(), 1.05);
    for _ in 0..n {
        let p: Vec<f64> = space
            .dims()
            .iter()
            .map(|d| rng.random_range(d.lower..d.upper))
            .collect();
        let linear = model.simulate(&p, &aux).unwrap();
        // distort the linear response so the design is not in the prior mean
        let a = rng.random_range(0.7..1.3);
        let b = rng.random_range(1.0..1.6);
        let peak = linear.max().max(1e-12);
        let y = linear.values().iter().map(|v| a * peak * (v / peak).powf(b)).collect();
        design.push(p, Origin::Halton, linear.with_values(y).unwrap()).unwrap();
    }
    aux.sigma = estimate_sigma(&design, &model, &aux).unwrap();
    let query = space
        .dims()
        .iter()
        .map(|d| rng.random_range(d.lower..d.upper))
        .collect();
    Instance {
        design,
        model,
        aux,
        query,
    }
}

/// The four-parameter toy problem used by the end-to-end tests.
pub fn toy_problem(nt: usize) -> (ToyCatchment, LinearPriorModel) {
    let space = toy_space(4).unwrap();
    let rain = synthetic_rain(nt, DT).unwrap();
    let toy = ToyCatchment::new(&space, rain.clone()).unwrap();
    let mapping = AggregateMapping::from_space(toy.aggregates(), &space).unwrap();
    (toy, LinearPriorModel::new(mapping, rain).unwrap())
}

pub fn close(a: f64, b: f64, rel: f64, scale: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(scale)
}

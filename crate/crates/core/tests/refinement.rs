mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::{base_aggregates, two_param_space, DT};
use mechemu_core::error::SimulatorError;
use mechemu_core::inference::{CalibrationProblem, SamplerSettings};
use mechemu_core::likelihood::{BetaPrior, Exponential, LikelihoodContext, PriorSpec, TruncatedNormal};
use mechemu_core::refinement::{cross_match_distance, run_refinement, RefinementSettings};
use mechemu_core::rng::Rng;
use mechemu_core::simulators::toy::synthetic_rain;
use mechemu_core::simulators::{LinearSimulator, Simulator};
use mechemu_core::{AggregateMapping, AuxiliaryParameters, Error, LinearPriorModel, Origin, TimeSeries};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

struct Counting<S> {
    inner: S,
    calls: AtomicUsize,
    /// 1-based call numbers that fail.
    fail_calls: Vec<usize>,
}

impl<S: Simulator> Simulator for Counting<S> {
    fn simulate(&self, theta: &[f64]) -> Result<TimeSeries, SimulatorError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_calls.contains(&call) {
            return Err(SimulatorError::Unstable("synthetic failure".into()));
        }
        self.inner.simulate(theta)
    }
}

fn linear_setup() -> (CalibrationProblem, LinearSimulator) {
    let space = two_param_space();
    let rain = synthetic_rain(60, DT).unwrap();
    let model = LinearPriorModel::new(AggregateMapping::from_space(base_aggregates(), &space).unwrap(), rain).unwrap();
    let aux = AuxiliaryParameters {
        k: 0.009,
        t0: 600.0,
        area: 1.1e6,
        gamma: 5.0,
        sigma: 0.0,
    };
    let sim = LinearSimulator { model, aux };
    let obs = sim.simulate(&[0.8, 1.1]).unwrap();
    let obs = obs
        .with_values(obs.values().iter().map(|v| v * 1.02 + 1e-3).collect())
        .unwrap();
    let prior = PriorSpec {
        params: space
            .dims()
            .iter()
            .map(|d| BetaPrior::new(d.lower, d.upper, d.center(), 2.5).unwrap())
            .collect(),
        sigma_e2: TruncatedNormal { mean: 1e-3, sd: 1e-3 },
        sigma_b2: Exponential { rate: 100.0 },
        tau: 1800.0,
    };
    let problem = CalibrationProblem::new(space, prior, LikelihoodContext::new(obs, 0.35).unwrap()).unwrap();
    (problem, sim)
}

fn quick_settings(budget: usize) -> RefinementSettings {
    let mut s = RefinementSettings::new(budget, 5).unwrap();
    s.sampler = SamplerSettings {
        walkers: Some(16),
        steps: 300,
        ..SamplerSettings::default()
    };
    s.subsample = 40;
    s
}

#[test]
fn refinement_spends_exactly_the_budget() {
    let (problem, sim) = linear_setup();
    let model = sim.model.clone();
    let counting = Counting {
        inner: sim,
        calls: AtomicUsize::new(0),
        fail_calls: Vec::new(),
    };
    let state = run_refinement(&problem, &counting, &model, quick_settings(32), None).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 32);
    assert_eq!(state.simulator_calls, 32);
    let sizes: Vec<usize> = state.diagnostics.iter().map(|d| d.design_size).collect();
    assert_eq!(sizes, vec![16, 20, 24, 28, 32]);
    assert_eq!(state.distances().len(), 4);
    assert_eq!(state.posteriors.len(), 5);
    assert!(state.design.origins()[..16].iter().all(|o| *o == Origin::Halton));
    assert!(state.design.origins()[16..]
        .iter()
        .all(|o| matches!(o, Origin::Refinement(_))));
}

#[test]
fn initial_design_is_kept_as_prefix() {
    let (problem, sim) = linear_setup();
    let model = sim.model.clone();
    let settings = quick_settings(32);
    let state = run_refinement(&problem, &sim, &model, settings, None).unwrap();
    let halton =
        mechemu_core::DesignSet::halton(problem.space.clone(), settings.overreach, 16, settings.halton_skip).unwrap();
    assert_eq!(&state.design.points()[..16], halton.points());
}

#[test]
fn failed_runs_are_replaced_and_recorded() {
    let (problem, sim) = linear_setup();
    let model = sim.model.clone();
    // two runs of the first refinement batch fail
    let counting = Counting {
        inner: sim,
        calls: AtomicUsize::new(0),
        fail_calls: vec![17, 19],
    };
    let state = run_refinement(&problem, &counting, &model, quick_settings(32), None).unwrap();
    assert_eq!(state.failures.len(), 2);
    assert!(state.failures.iter().all(|f| f.iteration == 1));
    assert_eq!(state.simulator_calls, 34);
    assert_eq!(counting.calls.load(Ordering::SeqCst), 34);
    assert_eq!(state.design.len(), 32);
}

#[test]
fn persistent_failure_aborts() {
    let (problem, sim) = linear_setup();
    let model = sim.model.clone();
    let counting = Counting {
        inner: sim,
        calls: AtomicUsize::new(0),
        fail_calls: (17..100).collect(),
    };
    let err = run_refinement(&problem, &counting, &model, quick_settings(32), None).unwrap_err();
    assert!(matches!(err, Error::Simulator(_)));
}

#[test]
fn budget_must_divide_by_eight() {
    assert!(matches!(
        RefinementSettings::new(100, 0),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn cross_match_limits() {
    let mut rng = Rng::seed_from_u64(2);
    let a: Vec<Vec<f64>> = (0..50)
        .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let far: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 100.0, p[1]]).collect();
    assert_eq!(cross_match_distance(&a, &far).unwrap(), 1.0);
}

fn sample(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cross_match_is_symmetric(seed in 0u64..1000, n in 2usize..30) {
        let a = sample(seed, n);
        let b = sample(seed + 7919, n);
        prop_assert_eq!(cross_match_distance(&a, &b).unwrap(), cross_match_distance(&b, &a).unwrap());
    }

    #[test]
    fn cross_match_is_affine_invariant(seed in 0u64..1000, n in 2usize..30, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let a = sample(seed, n);
        let b = sample(seed + 104_729, n);
        let map = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            s.iter().map(|p| p.iter().enumerate().map(|(j, x)| x * scale * (j + 1) as f64 + shift).collect()).collect()
        };
        let d = cross_match_distance(&a, &b).unwrap();
        let moved = cross_match_distance(&map(&a), &map(&b)).unwrap();
        prop_assert!((d - moved).abs() < 1e-12);
    }
}

use mechemu_core::design::{halton_points, radical_inverse, stretch_sample, DesignSet, Dimension, ParameterSpace};
use mechemu_core::rng::{self, Rng};
use mechemu_core::sampler::{flat_sample, run_ensemble, run_ensemble_with, EnsembleState};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn gaussian(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

fn ball(walkers: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..walkers)
        .map(|_| (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect())
        .collect()
}

#[test]
fn correlated_gaussian_moments() {
    // the stretch move is affine invariant, so a strongly skewed target is no harder
    let target = |x: &[f64]| {
        let u = x[0];
        let v = (x[1] - 3.0 * x[0]) / 0.1;
        -0.5 * (u * u + v * v)
    };
    let mut state = EnsembleState::new(ball(20, 2, 1), &target, rng::stream(1, rng::MCMC)).unwrap();
    let chain = run_ensemble(&target, &mut state, 3000, 2.0).unwrap();
    let s = flat_sample(&chain, 1000, 10).unwrap();
    let n = s.len() as f64;
    let m0 = s.iter().map(|p| p[0]).sum::<f64>() / n;
    let v0 = s.iter().map(|p| (p[0] - m0).powi(2)).sum::<f64>() / n;
    assert!(m0.abs() < 0.15, "{m0}");
    assert!((v0 - 1.0).abs() < 0.2, "{v0}");
    let acc = chain.acceptance_rate();
    assert!((0.2..0.8).contains(&acc), "{acc}");
}

#[test]
fn sampler_is_reproducible_and_serial_equals_parallel() {
    let run = |parallel| {
        let mut state = EnsembleState::new(ball(8, 3, 4), &gaussian, rng::stream(9, rng::MCMC)).unwrap();
        run_ensemble_with(&gaussian, &mut state, 200, 2.0, parallel).unwrap();
        state.walkers().to_vec()
    };
    assert_eq!(run(true), run(true));
    assert_eq!(run(true), run(false));
}

#[test]
fn ensemble_too_small_is_rejected() {
    assert!(EnsembleState::new(ball(5, 3, 0), &gaussian, rng::stream(0, rng::MCMC)).is_err());
}

#[test]
fn infeasible_start_is_rejected() {
    let never = |_: &[f64]| f64::NEG_INFINITY;
    assert!(EnsembleState::new(ball(8, 2, 0), &never, rng::stream(0, rng::MCMC)).is_err());
}

#[test]
fn halton_points_fill_the_unit_cube() {
    let pts = halton_points(64, 4, 1).unwrap();
    for d in 0..4 {
        // every coordinate hits each eighth of [0, 1) at least once
        let mut seen = [false; 8];
        for p in &pts {
            assert!((0.0..1.0).contains(&p[d]));
            seen[(p[d] * 8.0) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "dimension {d}");
    }
    assert_eq!(radical_inverse(6, 2).unwrap(), 0.375);
}

#[test]
fn design_round_trips_through_disk() {
    let space = ParameterSpace::new(vec![Dimension::new("a", 0.0, 1.0), Dimension::new("b", -2.0, 2.0)]).unwrap();
    let mut design = DesignSet::halton(space.clone(), 1.05, 10, 1).unwrap();
    let outs = (0..10)
        .map(|i| mechemu_core::TimeSeries::new(0.0, 60.0, vec![i as f64 * 0.125; 5]).unwrap())
        .collect();
    design.set_outputs(outs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    design.save(dir.path(), None).unwrap();
    let (back, _) = DesignSet::load(dir.path(), space, 1.05).unwrap();
    assert_eq!(back.points(), design.points());
    assert_eq!(back.outputs(), design.outputs());
    assert_eq!(back.design_csv(), design.design_csv());
}

proptest! {
    #[test]
    fn stretching_by_one_over_lambda_undoes_stretch(
        pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..20),
        lambda in 0.2f64..5.0,
    ) {
        let back = stretch_sample(&stretch_sample(&pts, lambda).unwrap(), 1.0 / lambda).unwrap();
        for (a, b) in back.iter().flatten().zip(pts.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stretch_keeps_the_mean(pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 2), 1..20)) {
        let mean = mechemu_core::design::sample_mean(&pts);
        let after = mechemu_core::design::sample_mean(&stretch_sample(&pts, 1.1).unwrap());
        for (a, b) in mean.iter().zip(&after) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

//! Synthetic observations `g^-1(g(y) + B + E)` for ground-truth experiments.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::likelihood::{box_cox, box_cox_inverse, ErrorModelParams};
use crate::rng::Rng;
use crate::series::TimeSeries;

use super::Simulator;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub series: TimeSeries,
    /// Points where the perturbed value left the inverse Box-Cox domain and
    /// was clipped to zero flow.
    pub clipped: usize,
}

/// Exact draw of the stationary bias process on a uniform grid.
pub fn draw_bias(len: usize, dt: f64, sigma_b: f64, tau: f64, rng: &mut Rng) -> Vec<f64> {
    let phi = (-dt / tau).exp();
    let innovation = sigma_b * (1.0 - phi * phi).sqrt();
    let mut b = 0.0;
    (0..len)
        .map(|i| {
            let e: f64 = StandardNormal.sample(rng);
            b = if i == 0 { sigma_b * e } else { phi * b + innovation * e };
            b
        })
        .collect()
}

/// Perturb a model output with bias and white noise in transformed space.
pub fn perturb(output: &TimeSeries, err: &ErrorModelParams, rng: &mut Rng) -> Result<Observation> {
    let bias = draw_bias(output.len(), output.step(), err.sigma_b, err.tau, rng);
    let mut clipped = 0;
    let mut values = Vec::with_capacity(output.len());
    for (&y, b) in output.values().iter().zip(bias) {
        let e: f64 = StandardNormal.sample(rng);
        let z = box_cox(y, err.lambda)? + b + err.sigma_e * e;
        values.push(match box_cox_inverse(z, err.lambda) {
            Ok(v) => v,
            Err(_) => {
                clipped += 1;
                0.0
            }
        });
    }
    if clipped > 0 {
        log::warn!("{clipped} observation values clipped to the Box-Cox domain boundary");
    }
    Ok(Observation {
        series: output.with_values(values)?,
        clipped,
    })
}

/// Simulate at `theta` and perturb the output.
pub fn make_observation(
    simulator: &dyn Simulator,
    theta: &[f64],
    err: &ErrorModelParams,
    rng: &mut Rng,
) -> Result<Observation> {
    let output = simulator.simulate(theta)?;
    perturb(&output, err, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn noiseless_is_exact() {
        let out = TimeSeries::new(0.0, 60.0, vec![0.0, 0.5, 2.0, 1.0]).unwrap();
        let err = ErrorModelParams {
            sigma_e: 0.0,
            sigma_b: 0.0,
            tau: 600.0,
            lambda: 0.35,
        };
        let obs = perturb(&out, &err, &mut Rng::seed_from_u64(1)).unwrap();
        for (a, b) in obs.series.values().iter().zip(out.values()) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
        assert_eq!(obs.clipped, 0);
    }

    #[test]
    fn reproducible() {
        let out = TimeSeries::new(0.0, 60.0, vec![1.0; 20]).unwrap();
        let err = ErrorModelParams {
            sigma_e: 0.1,
            sigma_b: 0.3,
            tau: 300.0,
            lambda: 0.35,
        };
        let a = perturb(&out, &err, &mut Rng::seed_from_u64(5)).unwrap();
        let b = perturb(&out, &err, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}

//! Dense Gaussian conditioning from explicit Green's-function moments.
//!
//! Every replica starts at rest one grid step before the first output time, so
//! with `tau` measured from that instant
//!
//! ```text
//! z_a(tau)            = h_a int_0^tau exp(kappa_a (tau - s)) u(s) ds
//! Sigma_ab(tau, tau') = sigma^2 h_a h_b R_ab int_0^min exp(kappa_a (tau - s) + kappa_b (tau' - s)) ds
//! ```
//!
//! The mean integral is evaluated by Gauss-Legendre quadrature per input
//! interval; the covariance integral has a closed form. Only meant for small
//! instances.

use nalgebra::{DMatrix, DVector};

use super::{
    check_conditioning_inputs, correlation_matrix, output_scale, robust_cholesky, warn_outside, EmulatorPrediction,
    OBSERVATION_JITTER,
};
use crate::design::{DesignSet, ParameterVector};
use crate::error::{Error, Result};
use crate::prior_model::{step_drive, AuxiliaryParameters, LinearPriorModel, Replica};

/// Largest `n * N_t` accepted by the dense route.
pub const DENSE_LIMIT: usize = 2000;

const QUADRATURE_NODES: usize = 12;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let n = order as f64;
    (0..order)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=order {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Prior mean of one replica at every grid time, by quadrature.
fn replica_mean(replica: Replica, input: &[f64], dt: f64, rule: &[(f64, f64)]) -> Vec<f64> {
    // interval j spans [j dt, (j + 1) dt) in tau, output i sits at tau = (i + 1) dt
    (0..input.len())
        .map(|i| {
            let tau = (i + 1) as f64 * dt;
            let total: f64 = input[..=i]
                .iter()
                .enumerate()
                .map(|(j, &u)| {
                    let (lo, hi) = (j as f64 * dt, (j + 1) as f64 * dt);
                    let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                    u * half
                        * rule
                            .iter()
                            .map(|&(x, w)| w * (replica.kappa * (tau - mid - half * x)).exp())
                            .sum::<f64>()
                })
                .sum();
            replica.gain * total
        })
        .collect()
}

/// Stacked prior mean and covariance of all replicas, replica-major
/// (`index = alpha * N_t + i`).
pub fn prior_moments(
    model: &LinearPriorModel,
    aux: &AuxiliaryParameters,
    thetas: &[ParameterVector],
    spans: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let replicas = thetas
        .iter()
        .map(|t| model.replica(t, aux))
        .collect::<Result<Vec<_>>>()?;
    let corr = correlation_matrix(thetas, aux.gamma, spans)?;
    let input = model.lagged_input(aux.t0);
    let dt = model.dt();
    let nt = input.len();
    let size = replicas.len() * nt;
    let rule = gauss_legendre(QUADRATURE_NODES);

    let mut mean = DVector::zeros(size);
    for (a, &rep) in replicas.iter().enumerate() {
        for (i, v) in replica_mean(rep, &input, dt, &rule).into_iter().enumerate() {
            mean[a * nt + i] = v;
        }
    }
    let s2 = aux.sigma * aux.sigma;
    let cov = DMatrix::from_fn(size, size, |r, c| {
        let (a, i) = (r / nt, r % nt);
        let (b, j) = (c / nt, c % nt);
        let (ka, kb) = (replicas[a].kappa, replicas[b].kappa);
        let (ti, tj) = ((i + 1) as f64 * dt, (j + 1) as f64 * dt);
        let m = ti.min(tj);
        s2 * replicas[a].gain
            * replicas[b].gain
            * corr[(a, b)]
            * (ka * (ti - m) + kb * (tj - m)).exp()
            * step_drive(ka + kb, m)
    });
    Ok((mean, cov))
}

/// Dense conditioning result including the full posterior covariance.
#[derive(Debug, Clone)]
pub struct DensePosterior {
    pub prediction: EmulatorPrediction,
    pub covariance: DMatrix<f64>,
}

/// Condition by explicit linear solves; see [`dense_condition`].
pub fn dense_posterior(
    design: &DesignSet,
    model: &LinearPriorModel,
    aux: &AuxiliaryParameters,
    theta: &[f64],
) -> Result<DensePosterior> {
    let n = design.len();
    let nt = model.len();
    if n * nt > DENSE_LIMIT {
        return Err(Error::Refused(format!(
            "dense conditioning limited to n * N_t <= {DENSE_LIMIT}, got {n} * {nt}"
        )));
    }
    check_conditioning_inputs(design, model, aux)?;
    warn_outside(design, theta);
    let mut thetas: Vec<ParameterVector> = design.points().to_vec();
    thetas.push(theta.to_vec());
    let (mean, cov) = prior_moments(model, aux, &thetas, &design.space().spans())?;
    let d = n * nt;
    let z_q = mean.rows(d, nt).into_owned();
    if aux.sigma == 0.0 {
        return Ok(DensePosterior {
            prediction: EmulatorPrediction::new(model.rain().with_values(z_q.as_slice().to_vec())?, vec![0.0; nt]),
            covariance: DMatrix::zeros(nt, nt),
        });
    }

    let scale = output_scale(design);
    let jitter = OBSERVATION_JITTER * scale * scale;
    let mut s_dd = cov.view((0, 0), (d, d)).into_owned();
    for k in 0..d {
        s_dd[(k, k)] += jitter;
    }
    let s_qd = cov.view((d, 0), (nt, d)).into_owned();
    let s_qq = cov.view((d, d), (nt, nt)).into_owned();
    let y = DVector::from_iterator(d, design.outputs().iter().flat_map(|o| o.values().iter().copied()));
    let resid = y - mean.rows(0, d);

    let chol = robust_cholesky(s_dd, "dense design covariance")?;
    let post_mean = z_q + &s_qd * chol.solve(&resid);
    let post_cov = &s_qq - &s_qd * chol.solve(&s_qd.transpose());
    let variance = post_cov.diagonal().iter().map(|v| v.max(0.0)).collect();
    Ok(DensePosterior {
        prediction: EmulatorPrediction::new(model.rain().with_values(post_mean.as_slice().to_vec())?, variance),
        covariance: post_cov,
    })
}

/// Predictive mean and marginal variance by dense conditioning.
pub fn dense_condition(
    design: &DesignSet,
    model: &LinearPriorModel,
    aux: &AuxiliaryParameters,
    theta: &[f64],
) -> Result<EmulatorPrediction> {
    Ok(dense_posterior(design, model, aux, theta)?.prediction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre(5);
        let wsum: f64 = rule.iter().map(|p| p.1).sum();
        assert!((wsum - 2.0).abs() < 1e-14);
        // exact up to degree 9
        let x8: f64 = rule.iter().map(|&(x, w)| w * x.powi(8)).sum();
        assert!((x8 - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_mean_matches_recursion() {
        let rep = Replica {
            kappa: -0.013,
            gain: 2.5,
        };
        let input: Vec<f64> = (0..30).map(|i| ((i as f64) * 0.4).sin().abs()).collect();
        let q = replica_mean(rep, &input, 60.0, &gauss_legendre(QUADRATURE_NODES));
        let r = crate::prior_model::respond(rep, &input, 60.0);
        for (a, b) in q.iter().zip(&r) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} {b}");
        }
    }
}

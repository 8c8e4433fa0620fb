//! Box-Cox transformed output model with an exponential-kernel bias process,
//! the priors of the calibration problem and the resulting log-posterior.
//!
//! In transformed space the observations are `g(y_model) + B + E` with `E`
//! white noise of sd `sigma_E` and `B` a stationary Ornstein-Uhlenbeck process
//! with covariance `sigma_B^2 exp(-|t_i - t_j| / tau)`. On a uniform grid `B` is
//! an AR(1) sequence, so the exact Gaussian log-density is available from a
//! scalar Kalman filter in `O(N_t)`.

use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::series::TimeSeries;

pub const DEFAULT_LAMBDA: f64 = 0.35;

/// Box-Cox transform `(y^lambda - 1) / lambda`.
pub fn box_cox(y: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "Box-Cox exponent must be non-zero, got {lambda}"
        )));
    }
    if !(y >= 0.0) {
        return Err(Error::invalid(format!("Box-Cox needs non-negative flow, got {y}")));
    }
    Ok((y.powf(lambda) - 1.0) / lambda)
}

/// Inverse of [`box_cox`].
pub fn box_cox_inverse(z: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "Box-Cox exponent must be non-zero, got {lambda}"
        )));
    }
    let base = lambda * z + 1.0;
    if !(base >= 0.0) {
        return Err(Error::invalid(format!(
            "inverse Box-Cox undefined at {z} (lambda z + 1 = {base})"
        )));
    }
    Ok(base.powf(1.0 / lambda))
}

/// Transform a flow that may dip slightly below zero (emulator means).
fn box_cox_clamped(y: f64, lambda: f64) -> f64 {
    (y.max(0.0).powf(lambda) - 1.0) / lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelParams {
    pub sigma_e: f64,
    pub sigma_b: f64,
    /// Bias correlation time (s).
    pub tau: f64,
    pub lambda: f64,
}

impl ErrorModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_e > 0.0 && self.sigma_b >= 0.0 && self.tau > 0.0 && self.lambda > 0.0 && self.lambda <= 1.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid error model parameters: {self:?}")))
        }
    }
}

/// Bias covariance `sigma_B^2 exp(-|t_i - t_j| / tau)`.
pub fn bias_covariance(times: &[f64], sigma_b: f64, tau: f64) -> Result<DMatrix<f64>> {
    if !(sigma_b >= 0.0 && tau > 0.0) {
        return Err(Error::invalid("bias covariance needs sigma_B >= 0 and tau > 0"));
    }
    let s2 = sigma_b * sigma_b;
    let n = times.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        s2 * (-(times[i] - times[j]).abs() / tau).exp()
    }))
}

/// Gaussian log-density of transformed residuals on a uniform grid with step `dt`.
fn residual_log_density(resid: impl Iterator<Item = f64>, dt: f64, sigma_e: f64, sigma_b: f64, tau: f64) -> f64 {
    let phi = (-dt / tau).exp();
    let s_e2 = sigma_e * sigma_e;
    let s_b2 = sigma_b * sigma_b;
    let refresh = s_b2 * (-(2.0 * dt / tau)).exp_m1().abs();
    let mut m = 0.0;
    let mut p = s_b2;
    let mut total = 0.0;
    for r in resid {
        let s = p + s_e2;
        let v = r - m;
        total -= 0.5 * ((2.0 * PI * s).ln() + v * v / s);
        let k = p / s;
        m = phi * (m + k * v);
        p = phi * phi * (p * s_e2 / s) + refresh;
    }
    total
}

/// Exact log-likelihood of `observed` given the model output.
pub fn log_likelihood(observed: &TimeSeries, model: &TimeSeries, err: &ErrorModelParams) -> Result<f64> {
    err.validate()?;
    observed.check_same_grid(model, "observation vs model output")?;
    let mut resid = Vec::with_capacity(observed.len());
    for (&o, &y) in observed.values().iter().zip(model.values()) {
        resid.push(box_cox(o, err.lambda)? - box_cox(y, err.lambda)?);
    }
    Ok(residual_log_density(
        resid.into_iter(),
        observed.step(),
        err.sigma_e,
        err.sigma_b,
        err.tau,
    ))
}

/// Pre-transformed observations for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LikelihoodContext {
    observed: TimeSeries,
    transformed: Vec<f64>,
    lambda: f64,
}

impl LikelihoodContext {
    pub fn new(observed: TimeSeries, lambda: f64) -> Result<Self> {
        let transformed = observed
            .values()
            .iter()
            .map(|&y| box_cox(y, lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            observed,
            transformed,
            lambda,
        })
    }

    pub fn observed(&self) -> &TimeSeries {
        &self.observed
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.transformed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transformed.is_empty()
    }

    /// Log-likelihood of raw model flows; negative flows are clamped to zero.
    pub fn log_likelihood(&self, model: &[f64], sigma_e: f64, sigma_b: f64, tau: f64) -> f64 {
        debug_assert_eq!(model.len(), self.transformed.len());
        let lambda = self.lambda;
        residual_log_density(
            self.transformed
                .iter()
                .zip(model)
                .map(|(&o, &y)| o - box_cox_clamped(y, lambda)),
            self.observed.step(),
            sigma_e,
            sigma_b,
            tau,
        )
    }
}

/// Beta prior on `[lower, upper]` with a given mode and concentration `alpha + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub lower: f64,
    pub upper: f64,
    pub mode: f64,
    pub concentration: f64,
}

impl BetaPrior {
    pub fn new(lower: f64, upper: f64, mode: f64, concentration: f64) -> Result<Self> {
        let p = Self {
            lower,
            upper,
            mode,
            concentration,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::invalid("beta prior needs lower < upper"));
        }
        if !(self.mode > self.lower && self.mode < self.upper) {
            return Err(Error::invalid(format!(
                "beta prior mode {} must lie strictly inside [{}, {}]",
                self.mode, self.lower, self.upper
            )));
        }
        if !(self.concentration > 2.0) {
            return Err(Error::invalid("beta prior concentration must exceed 2"));
        }
        Ok(())
    }

    /// Shape parameters `(alpha, beta)`.
    pub fn shapes(&self) -> (f64, f64) {
        let x = (self.mode - self.lower) / (self.upper - self.lower);
        let c = self.concentration - 2.0;
        (1.0 + x * c, 1.0 + (1.0 - x) * c)
    }

    pub fn ln_pdf(&self, value: f64) -> f64 {
        if !(value > self.lower && value < self.upper) {
            return f64::NEG_INFINITY;
        }
        let width = self.upper - self.lower;
        let x = (value - self.lower) / width;
        let (a, b) = self.shapes();
        (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b) - width.ln()
    }
}

/// Normal prior truncated to the non-negative half line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub sd: f64,
}

impl TruncatedNormal {
    pub fn ln_pdf(&self, value: f64) -> f64 {
        if !(value >= 0.0) || !(self.sd > 0.0) {
            return f64::NEG_INFINITY;
        }
        let z = (value - self.mean) / self.sd;
        let mass = Normal::standard().sf(-self.mean / self.sd);
        -0.5 * z * z - 0.5 * (2.0 * PI).ln() - self.sd.ln() - mass.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponential {
    pub rate: f64,
}

impl Exponential {
    pub fn ln_pdf(&self, value: f64) -> f64 {
        if !(value >= 0.0) || !(self.rate > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.rate.ln() - self.rate * value
    }
}

/// Independent priors on the model parameters and the error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub params: Vec<BetaPrior>,
    /// Prior on `sigma_E^2`.
    pub sigma_e2: TruncatedNormal,
    /// Prior on `sigma_B^2`.
    pub sigma_b2: Exponential,
    /// Fixed bias correlation time (s).
    pub tau: f64,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            p.validate()?;
        }
        if !(self.sigma_e2.sd > 0.0) {
            return Err(Error::invalid("sigma_E^2 prior sd must be positive"));
        }
        if !(self.sigma_b2.rate > 0.0) {
            return Err(Error::invalid("sigma_B^2 prior rate must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }
}

/// Sum of the marginal log-priors; `-inf` outside the support.
pub fn log_prior(theta: &[f64], err: &ErrorModelParams, spec: &PriorSpec) -> f64 {
    if theta.len() != spec.params.len() || err.tau != spec.tau {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (p, &x) in spec.params.iter().zip(theta) {
        total += p.ln_pdf(x);
        if total == f64::NEG_INFINITY {
            return total;
        }
    }
    total + spec.sigma_e2.ln_pdf(err.sigma_e * err.sigma_e) + spec.sigma_b2.ln_pdf(err.sigma_b * err.sigma_b)
}

pub fn log_posterior(
    theta: &[f64],
    err: &ErrorModelParams,
    spec: &PriorSpec,
    observed: &TimeSeries,
    model: &TimeSeries,
) -> Result<f64> {
    let lp = log_prior(theta, err, spec);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(lp + log_likelihood(observed, model, err)?)
}

/// Map a sampling vector `(theta, ln sigma_E, ln sigma_B)` to natural scale.
pub fn split_sampling_vector(x: &[f64], tau: f64, lambda: f64) -> (&[f64], ErrorModelParams) {
    let d = x.len() - 2;
    (
        &x[..d],
        ErrorModelParams {
            sigma_e: x[d].exp(),
            sigma_b: x[d + 1].exp(),
            tau,
            lambda,
        },
    )
}

/// Unnormalized log-posterior in sampling coordinates.
///
/// `simulate` is only called inside the prior support. Its failures count as
/// zero posterior density.
pub fn log_target<F>(x: &[f64], spec: &PriorSpec, context: &LikelihoodContext, simulate: F) -> f64
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let (theta, err) = split_sampling_vector(x, spec.tau, context.lambda());
    let lp = log_prior(theta, &err, spec);
    if !lp.is_finite() || !(err.sigma_e > 0.0) {
        return f64::NEG_INFINITY;
    }
    // densities are on the variances; sampling is on log standard deviations
    let jacobian = 2.0 * LN_2 + 2.0 * (x[x.len() - 2] + x[x.len() - 1]);
    match simulate(theta) {
        Ok(flow) => {
            let ll = context.log_likelihood(&flow, err.sigma_e, err.sigma_b, err.tau);
            if ll.is_finite() {
                lp + jacobian + ll
            } else {
                f64::NEG_INFINITY
            }
        }
        Err(e) => {
            log::debug!("model evaluation failed at {theta:?}: {e}");
            f64::NEG_INFINITY
        }
    }
}

/// One third of the recession time of `flow`: the time from the peak until the
/// flow first drops below 5% of the peak (or the end of the series).
pub fn recession_tau(flow: &TimeSeries) -> Result<f64> {
    let values = flow.values();
    let (peak_at, peak) =
        values.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, v)| if v > best.1 { (i, v) } else { best },
        );
    if !(peak > 0.0) {
        return Err(Error::invalid("recession time needs a positive peak"));
    }
    let end = values[peak_at..]
        .iter()
        .position(|&v| v < 0.05 * peak)
        .map_or(values.len() - 1, |k| peak_at + k);
    let recession = (end - peak_at).max(1) as f64 * flow.step();
    Ok(recession / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_cox_examples() {
        for lambda in [0.1, 0.35, 1.0] {
            assert_eq!(box_cox(1.0, lambda).unwrap(), 0.0);
        }
        assert!((box_cox(2.0, 0.35).unwrap() - 0.784_458_935).abs() < 1e-6);
        for y in [0.1, 1.0, 10.0] {
            let back = box_cox_inverse(box_cox(y, 0.35).unwrap(), 0.35).unwrap();
            assert!((back - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!(box_cox(-1.0, 0.35).is_err());
        assert!(box_cox_inverse(-10.0, 0.35).is_err());
    }

    #[test]
    fn bias_covariance_examples() {
        let c = bias_covariance(&[0.0, 50.0, 100.0], 2.0, 100.0).unwrap();
        assert_eq!(c[(1, 1)], 4.0);
        assert!((c[(0, 2)] - 4.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(bias_covariance(&[0.0, 1.0], 0.0, 1.0).unwrap(), DMatrix::zeros(2, 2));
    }

    fn err(sigma_e: f64, sigma_b: f64) -> ErrorModelParams {
        ErrorModelParams {
            sigma_e,
            sigma_b,
            tau: 100.0,
            lambda: 1.0,
        }
    }

    #[test]
    fn standard_normal_at_mode() {
        let o = TimeSeries::new(0.0, 1.0, vec![1.0, 2.0]).unwrap();
        let ll = log_likelihood(&o, &o, &err(1.0, 0.0)).unwrap();
        assert!((ll + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn diagonal_case() {
        let o = TimeSeries::new(0.0, 60.0, vec![1.0, 2.0, 3.5]).unwrap();
        let m = TimeSeries::new(0.0, 60.0, vec![1.5, 1.0, 3.0]).unwrap();
        let s = 0.7;
        let expected: f64 = [-0.5, 1.0, 0.5]
            .iter()
            .map(|r: &f64| -0.5 * (2.0 * PI * s * s).ln() - r * r / (2.0 * s * s))
            .sum();
        assert!((log_likelihood(&o, &m, &err(s, 0.0)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn beta_prior_mode_is_maximum() {
        let p = BetaPrior::new(0.5, 1.1, 1.0, 6.0).unwrap();
        let (a, b) = p.shapes();
        assert!((a + b - 6.0).abs() < 1e-12);
        let at_mode = p.ln_pdf(1.0);
        for i in 1..100 {
            let x = 0.5 + 0.6 * i as f64 / 100.0;
            assert!(p.ln_pdf(x) <= at_mode + 1e-12);
        }
        assert_eq!(p.ln_pdf(0.5), f64::NEG_INFINITY);
        assert_eq!(p.ln_pdf(1.2), f64::NEG_INFINITY);
        assert!(BetaPrior::new(0.5, 1.5, 1.5, 6.0).is_err());
        assert!(BetaPrior::new(0.5, 1.5, 1.0, 2.0).is_err());
    }

    #[test]
    fn exponential_ratio() {
        let e = Exponential { rate: 3.0 };
        let x = 0.4;
        assert!((e.ln_pdf(x) - e.ln_pdf(x + 1.0 / 3.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_normal_normalizes() {
        let t = TruncatedNormal { mean: 0.2, sd: 0.5 };
        let h = 1e-4;
        let total: f64 = (0..100_000).map(|i| t.ln_pdf((i as f64 + 0.5) * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
        assert_eq!(t.ln_pdf(-0.1), f64::NEG_INFINITY);
    }

    #[test]
    fn recession_rule_on_exponential() {
        let flow = TimeSeries::new(
            0.0,
            10.0,
            (0..2000).map(|i| (-(i as f64) * 10.0 / 600.0).exp()).collect(),
        )
        .unwrap();
        let tau = recession_tau(&flow).unwrap();
        assert!((tau - 600.0).abs() < 10.0, "{tau}");
    }
}

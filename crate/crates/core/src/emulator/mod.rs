//! Mechanistic emulator: `n + 1` coupled replicas of the linear reservoir.
//!
//! Replica `alpha` follows `d' = kappa_alpha d + p + sigma (R eta)_alpha` with
//! white noise `eta` and replica correlation
//! `(R R^T)_ab = exp(-|(theta_a - theta_b) / rho| / gamma)`. Conditioning the
//! query replica on the design replicas gives the emulator.
//!
//! Three evaluation routes share the model:
//!
//! * [`Emulator`]: design outputs are treated as exact observations of the
//!   design states. The state innovations of the design replicas over each
//!   grid step are then known, and the query innovation is a linear regression
//!   on them. Per query this costs `O(n^2 + n N_t)` after a one-off
//!   factorization; this is the route used inside MCMC.
//! * [`kalman::condition`]: joint Kalman filter and RTS smoother over all
//!   `n + 1` replicas with a small observation jitter. `O(N_t n^3)` per query.
//! * [`dense::dense_condition`]: explicit Green's-function moments and
//!   Gaussian conditioning with dense solves, for small instances only.

pub mod dense;
pub mod kalman;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::{DesignSet, ParameterVector};
use crate::error::{Error, Result};
use crate::prior_model::{step_drive, AuxiliaryParameters, LinearPriorModel, Replica};
use crate::series::TimeSeries;

/// Observation jitter on design outputs, relative to the squared output scale.
pub const OBSERVATION_JITTER: f64 = 1e-10;

/// Coupling between two replicas.
pub fn correlation(a: &[f64], b: &[f64], gamma: f64, spans: &[f64]) -> f64 {
    let dist2: f64 = a
        .iter()
        .zip(b)
        .zip(spans)
        .map(|((x, y), rho)| {
            let d = (x - y) / rho;
            d * d
        })
        .sum();
    (-dist2.sqrt() / gamma).exp()
}

/// Replica correlation matrix `(R R^T)`.
pub fn correlation_matrix(thetas: &[ParameterVector], gamma: f64, spans: &[f64]) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!(
            "correlation length must be positive, got {gamma}"
        )));
    }
    if spans.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid("spans must be positive"));
    }
    let n = thetas.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            correlation(&thetas[i], &thetas[j], gamma, spans)
        }
    }))
}

/// `int_0^dt exp((ka + kb) u) du`, the unit-noise covariance accrued over one step.
pub fn noise_integral(ka: f64, kb: f64, dt: f64) -> f64 {
    step_drive(ka + kb, dt)
}

/// The coupled linear system of replicas.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub kappas: Vec<f64>,
    pub gains: Vec<f64>,
    /// Lagged input per step. All replicas share it because the rain does not
    /// depend on the simulator parameters.
    pub input: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub sigma: f64,
    pub dt: f64,
}

impl CoupledSystem {
    pub fn new(
        kappas: Vec<f64>,
        gains: Vec<f64>,
        input: Vec<f64>,
        correlation: DMatrix<f64>,
        sigma: f64,
        dt: f64,
    ) -> Result<Self> {
        let m = kappas.len();
        if gains.len() != m || correlation.nrows() != m || correlation.ncols() != m {
            return Err(Error::invalid("coupled system dimensions disagree"));
        }
        if kappas.iter().any(|&k| !(k < 0.0)) {
            return Err(Error::invalid("all release rates must be negative"));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid("time step must be positive"));
        }
        if !(sigma >= 0.0) {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        for i in 0..m {
            if (correlation[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("correlation matrix must have unit diagonal"));
            }
            for j in 0..i {
                if (correlation[(i, j)] - correlation[(j, i)]).abs() > 1e-12 {
                    return Err(Error::invalid("correlation matrix must be symmetric"));
                }
            }
        }
        Ok(Self {
            kappas,
            gains,
            input,
            correlation,
            sigma,
            dt,
        })
    }

    /// Replicas for `thetas` under the prior model and auxiliary parameters.
    pub fn from_model(
        model: &LinearPriorModel,
        aux: &AuxiliaryParameters,
        thetas: &[ParameterVector],
        spans: &[f64],
    ) -> Result<Self> {
        let replicas = thetas
            .iter()
            .map(|t| model.replica(t, aux))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            replicas.iter().map(|r| r.kappa).collect(),
            replicas.iter().map(|r| r.gain).collect(),
            model.lagged_input(aux.t0),
            correlation_matrix(thetas, aux.gamma, spans)?,
            aux.sigma,
            model.dt(),
        )
    }

    pub fn len(&self) -> usize {
        self.kappas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappas.is_empty()
    }
}

/// Exact one-step discretization of a [`CoupledSystem`].
#[derive(Debug, Clone)]
pub struct Discretization {
    /// `exp(kappa dt)` per replica.
    pub transitions: Vec<f64>,
    /// State response to a unit input held over one step.
    pub drives: Vec<f64>,
    /// Process-noise covariance accrued over one step.
    pub noise: DMatrix<f64>,
}

pub fn discretize(system: &CoupledSystem) -> Result<Discretization> {
    if !(system.dt > 0.0) {
        return Err(Error::invalid("time step must be positive"));
    }
    let dt = system.dt;
    let s2 = system.sigma * system.sigma;
    let m = system.len();
    Ok(Discretization {
        transitions: system.kappas.iter().map(|k| (k * dt).exp()).collect(),
        drives: system.kappas.iter().map(|&k| step_drive(k, dt)).collect(),
        noise: DMatrix::from_fn(m, m, |a, b| {
            s2 * system.correlation[(a, b)] * noise_integral(system.kappas[a], system.kappas[b], dt)
        }),
    })
}

/// Predictive distribution of the simulator output at one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorPrediction {
    pub mean: TimeSeries,
    /// Marginal variance per grid time (output units squared).
    pub variance: Vec<f64>,
    pub rmse_estimate: f64,
}

impl EmulatorPrediction {
    pub fn new(mean: TimeSeries, variance: Vec<f64>) -> Self {
        let rmse_estimate = rmse_of(&variance);
        Self {
            mean,
            variance,
            rmse_estimate,
        }
    }
}

fn rmse_of(variance: &[f64]) -> f64 {
    if variance.is_empty() {
        return 0.0;
    }
    (variance.iter().sum::<f64>() / variance.len() as f64).sqrt()
}

/// Square root of the time-averaged predictive variance.
pub fn predicted_rmse(prediction: &EmulatorPrediction) -> f64 {
    rmse_of(&prediction.variance)
}

/// Scale used for the observation jitter: the largest absolute design output.
pub(crate) fn output_scale(design: &DesignSet) -> f64 {
    let s = design
        .outputs()
        .iter()
        .flat_map(|o| o.values())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

pub(crate) fn check_conditioning_inputs(
    design: &DesignSet,
    model: &LinearPriorModel,
    aux: &AuxiliaryParameters,
) -> Result<()> {
    aux.validate()?;
    if design.is_empty() || !design.has_outputs() {
        return Err(Error::invalid("emulator needs a design with outputs"));
    }
    for out in design.outputs() {
        model.rain().check_same_grid(out, "design output vs rain")?;
        if out.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design outputs must be finite"));
        }
    }
    Ok(())
}

pub(crate) fn warn_outside(design: &DesignSet, theta: &[f64]) {
    if !design.design_box().contains(theta) {
        log::warn!("emulator query {theta:?} lies outside the overreached design box");
    }
}

/// Cholesky with a growing diagonal nugget when the matrix is numerically singular.
pub(crate) fn robust_cholesky(mut a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let scale = a
        .diagonal()
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let mut nugget = 0.0;
    for attempt in 0..8 {
        if let Some(ch) = Cholesky::new(a.clone()) {
            if attempt > 0 {
                log::debug!("{what}: factorized with relative nugget {:e}", nugget / scale);
            }
            return Ok(ch);
        }
        let next = if nugget == 0.0 { 1e-13 * scale } else { nugget * 10.0 };
        for i in 0..a.nrows() {
            a[(i, i)] += next - nugget;
        }
        nugget = next;
    }
    Err(Error::numerical(format!("{what}: matrix is not positive definite")))
}

/// Design-side quantities shared by every query: replicas, exact design states,
/// their one-step innovations and the factorized unit-noise covariance.
#[derive(Debug, Clone)]
pub struct DesignStructure {
    points: Vec<ParameterVector>,
    replicas: Vec<Replica>,
    spans: Vec<f64>,
    gamma: f64,
    dt: f64,
    input: Vec<f64>,
    /// Cholesky factor of the unit-noise innovation covariance of the design replicas.
    chol: Cholesky<f64, Dyn>,
    /// Design state innovations, one column per grid step (n x N_t).
    innovations: DMatrix<f64>,
    /// `Q^-1 W`, reused by every query (n x N_t).
    weighted: DMatrix<f64>,
}

impl DesignStructure {
    pub fn new(design: &DesignSet, model: &LinearPriorModel, aux: &AuxiliaryParameters) -> Result<Self> {
        check_conditioning_inputs(design, model, aux)?;
        let points = design.points().to_vec();
        let spans = design.space().spans();
        let replicas = points
            .iter()
            .map(|p| model.replica(p, aux))
            .collect::<Result<Vec<_>>>()?;
        let dt = model.dt();
        let input = model.lagged_input(aux.t0);
        let n = points.len();
        let nt = input.len();

        let mut innovations = DMatrix::zeros(n, nt);
        for (a, (rep, out)) in replicas.iter().zip(design.outputs()).enumerate() {
            let phi = (rep.kappa * dt).exp();
            let drive = step_drive(rep.kappa, dt);
            let mut prev = 0.0;
            for (i, (&y, &u)) in out.values().iter().zip(&input).enumerate() {
                let d = y / rep.gain;
                innovations[(a, i)] = d - phi * prev - drive * u;
                prev = d;
            }
        }

        let corr = correlation_matrix(&points, aux.gamma, &spans)?;
        let q = DMatrix::from_fn(n, n, |a, b| {
            corr[(a, b)] * noise_integral(replicas[a].kappa, replicas[b].kappa, dt)
        });
        let chol = robust_cholesky(q, "design innovation covariance")?;
        let weighted = chol.solve(&innovations);
        Ok(Self {
            points,
            replicas,
            spans,
            gamma: aux.gamma,
            dt,
            input,
            chol,
            innovations,
            weighted,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(y - z)^T S^-1 (y - z) / (n N_t)`, the squared noise scale.
    pub fn sigma_squared_estimate(&self) -> f64 {
        let quad = self.innovations.component_mul(&self.weighted).sum();
        quad / (self.innovations.nrows() * self.innovations.ncols()) as f64
    }

    pub fn sigma_estimate(&self) -> f64 {
        self.sigma_squared_estimate().max(0.0).sqrt()
    }

    /// Unit-noise cross covariance between the query and each design replica
    /// over one step, plus the query's own one-step variance.
    fn query_covariances(&self, theta: &[f64], query: Replica) -> (DVector<f64>, f64) {
        let cross = DVector::from_iterator(
            self.points.len(),
            self.points.iter().zip(&self.replicas).map(|(p, r)| {
                correlation(p, theta, self.gamma, &self.spans) * noise_integral(r.kappa, query.kappa, self.dt)
            }),
        );
        (cross, noise_integral(query.kappa, query.kappa, self.dt))
    }
}

/// Emulator conditioned on a design set, ready for repeated queries.
#[derive(Debug, Clone)]
pub struct Emulator {
    design: DesignSet,
    model: LinearPriorModel,
    aux: AuxiliaryParameters,
    structure: DesignStructure,
}

impl Emulator {
    /// Precompute the conditioning structures for `design`.
    pub fn build(design: &DesignSet, model: &LinearPriorModel, aux: AuxiliaryParameters) -> Result<Self> {
        let structure = DesignStructure::new(design, model, &aux)?;
        Ok(Self {
            design: design.clone(),
            model: model.clone(),
            aux,
            structure,
        })
    }

    pub fn design(&self) -> &DesignSet {
        &self.design
    }

    pub fn model(&self) -> &LinearPriorModel {
        &self.model
    }

    pub fn aux(&self) -> &AuxiliaryParameters {
        &self.aux
    }

    fn query_mean(&self, theta: &[f64], query: Replica, cross: &DVector<f64>, out: &mut Vec<f64>) {
        let s = &self.structure;
        let phi = (query.kappa * s.dt).exp();
        let drive = step_drive(query.kappa, s.dt);
        // regression of the query innovation on the design innovations
        let shift = s.weighted.tr_mul(cross);
        out.clear();
        let mut d = 0.0;
        for (i, &u) in s.input.iter().enumerate() {
            d = phi * d + drive * u + shift[i];
            out.push(query.gain * d);
        }
        debug_assert_eq!(out.len(), self.model.len(), "{theta:?}");
    }

    /// Posterior mean only, written into `out`. This is the MCMC hot path.
    pub fn predict_mean_into(&self, theta: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let query = self.model.replica(theta, &self.aux)?;
        if self.aux.sigma == 0.0 {
            out.clear();
            out.extend(crate::prior_model::respond(
                query,
                &self.structure.input,
                self.structure.dt,
            ));
            return Ok(());
        }
        let (cross, _) = self.structure.query_covariances(theta, query);
        self.query_mean(theta, query, &cross, out);
        Ok(())
    }

    /// Posterior mean and marginal variance at `theta`.
    pub fn predict(&self, theta: &[f64]) -> Result<EmulatorPrediction> {
        warn_outside(&self.design, theta);
        let query = self.model.replica(theta, &self.aux)?;
        let s = &self.structure;
        let nt = s.input.len();
        if self.aux.sigma == 0.0 {
            let mean = crate::prior_model::respond(query, &s.input, s.dt);
            return Ok(EmulatorPrediction::new(
                self.model.rain().with_values(mean)?,
                vec![0.0; nt],
            ));
        }
        let (cross, own) = s.query_covariances(theta, query);
        let mut mean = Vec::with_capacity(nt);
        self.query_mean(theta, query, &cross, &mut mean);

        let whitened = s.chol.l().solve_lower_triangular(&cross).expect("non-singular factor");
        let step_var = (own - whitened.norm_squared()).max(0.0) * self.aux.sigma * self.aux.sigma;
        let phi2 = (2.0 * query.kappa * s.dt).exp();
        let g2 = query.gain * query.gain;
        let mut p = 0.0;
        let variance = (0..nt)
            .map(|_| {
                p = phi2 * p + step_var;
                g2 * p
            })
            .collect();
        Ok(EmulatorPrediction::new(self.model.rain().with_values(mean)?, variance))
    }
}

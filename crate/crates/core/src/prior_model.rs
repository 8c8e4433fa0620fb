//! Single linear reservoir used as the emulator's mechanistic prior.
//!
//! State `d` is a water level in metres driven by the lagged rain intensity
//! `p(t - t0)` in m/s:
//!
//! ```text
//! d'(t) = kappa d(t) + p(t - t0),    kappa = -k w sqrt(s) / (A n r)
//! Q_i   = k w sqrt(s) / n * d(t_i)   (m^3/s)
//! ```
//!
//! The output gain equals `|kappa| * A * r`, so a constant rain `p0` settles at
//! `Q* = p0 * A * r`: the estimated area times imperviousness acts as the
//! contributing area. The reservoir is at rest one grid step before the first
//! sample and the rain is piecewise constant over each grid interval, which
//! makes the stepping exact.

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason};
use argmin::solver::neldermead::NelderMead;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::{DesignSet, ParameterSpace};
use crate::error::{Error, Result};
use crate::rng;
use crate::series::TimeSeries;

/// Default correlation length of the replica coupling.
pub const DEFAULT_GAMMA: f64 = 5.0;

/// Catchment averages entering the release rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatchmentAggregates {
    /// Overland flow width (m).
    pub width: f64,
    /// Slope (fraction).
    pub slope: f64,
    /// Manning roughness (s m^-1/3).
    pub roughness: f64,
    /// Impervious fraction.
    pub imperviousness: f64,
}

impl CatchmentAggregates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.width, self.slope, self.roughness, self.imperviousness];
        if all.iter().all(|&x| x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "catchment aggregates must be positive: {self:?}"
            )))
        }
    }
}

/// Parameter names recognized as scaling factors for the aggregates.
pub const IMPERVIOUSNESS_PARAM: &str = "impervious_area";
pub const WIDTH_PARAM: &str = "width";
pub const SLOPE_PARAM: &str = "slope";
pub const ROUGHNESS_PARAM: &str = "n_imp";

/// Multiplicative map from scaling-factor parameters to aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMapping {
    base: CatchmentAggregates,
    width: Option<usize>,
    slope: Option<usize>,
    roughness: Option<usize>,
    imperviousness: Option<usize>,
}

impl AggregateMapping {
    /// Look up the scaling parameters by their conventional names; missing
    /// classes keep their base value.
    pub fn from_space(base: CatchmentAggregates, space: &ParameterSpace) -> Result<Self> {
        base.validate()?;
        Ok(Self {
            base,
            width: space.index_of(WIDTH_PARAM),
            slope: space.index_of(SLOPE_PARAM),
            roughness: space.index_of(ROUGHNESS_PARAM),
            imperviousness: space.index_of(IMPERVIOUSNESS_PARAM),
        })
    }

    /// Mapping that ignores the parameter vector entirely.
    pub fn constant(base: CatchmentAggregates) -> Result<Self> {
        base.validate()?;
        Ok(Self {
            base,
            width: None,
            slope: None,
            roughness: None,
            imperviousness: None,
        })
    }

    pub fn base(&self) -> &CatchmentAggregates {
        &self.base
    }

    pub fn aggregates(&self, theta: &[f64]) -> Result<CatchmentAggregates> {
        let scale = |idx: Option<usize>| -> Result<f64> {
            match idx {
                None => Ok(1.0),
                Some(i) => theta
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("parameter vector too short for index {i}"))),
            }
        };
        let agg = CatchmentAggregates {
            width: self.base.width * scale(self.width)?,
            slope: self.base.slope * scale(self.slope)?,
            roughness: self.base.roughness * scale(self.roughness)?,
            imperviousness: self.base.imperviousness * scale(self.imperviousness)?,
        };
        agg.validate()?;
        Ok(agg)
    }
}

/// Emulator-only parameters `(k, t0, A, gamma, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryParameters {
    /// Linearization constant (m^2/3).
    pub k: f64,
    /// Catchment lag (s).
    pub t0: f64,
    /// Effective area (m^2).
    pub area: f64,
    /// Correlation length of the replica coupling.
    pub gamma: f64,
    /// Noise scale of the coupled system.
    pub sigma: f64,
}

impl AuxiliaryParameters {
    pub fn validate(&self) -> Result<()> {
        if self.k > 0.0 && self.area > 0.0 && self.t0 >= 0.0 && self.gamma > 0.0 && self.sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid auxiliary parameters: {self:?}")))
        }
    }
}

/// Release rate `kappa = -k w sqrt(s) / (A n r)` (1/s).
pub fn release_rate(aux: &AuxiliaryParameters, agg: &CatchmentAggregates) -> Result<f64> {
    agg.validate()?;
    if !(aux.k > 0.0 && aux.area > 0.0) {
        return Err(Error::invalid("k and A must be positive"));
    }
    Ok(-aux.k * agg.width * agg.slope.sqrt() / (aux.area * agg.roughness * agg.imperviousness))
}

/// Output gain `k w sqrt(s) / n` mapping the state (m) to flow (m^3/s).
pub fn output_gain(aux: &AuxiliaryParameters, agg: &CatchmentAggregates) -> f64 {
    aux.k * agg.width * agg.slope.sqrt() / agg.roughness
}

/// `(exp(kappa dt) - 1) / kappa`: state response to a unit input held over one step.
pub fn step_drive(kappa: f64, dt: f64) -> f64 {
    if (kappa * dt).abs() < 1e-300 {
        dt
    } else {
        (kappa * dt).exp_m1() / kappa
    }
}

/// One replica of the linear model: release rate and output gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replica {
    pub kappa: f64,
    pub gain: f64,
}

/// The linear prior model bound to a rain series.
#[derive(Debug, Clone)]
pub struct LinearPriorModel {
    mapping: AggregateMapping,
    rain: TimeSeries,
}

impl LinearPriorModel {
    /// `rain` holds intensities in m/s on the output grid.
    pub fn new(mapping: AggregateMapping, rain: TimeSeries) -> Result<Self> {
        if let Some(i) = rain.values().iter().position(|&p| !(p >= 0.0)) {
            return Err(Error::invalid(format!(
                "rain must be non-negative, found {} at index {i}",
                rain.values()[i]
            )));
        }
        Ok(Self { mapping, rain })
    }

    pub fn mapping(&self) -> &AggregateMapping {
        &self.mapping
    }

    pub fn rain(&self) -> &TimeSeries {
        &self.rain
    }

    pub fn dt(&self) -> f64 {
        self.rain.step()
    }

    pub fn len(&self) -> usize {
        self.rain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rain.is_empty()
    }

    /// Input held over the interval ending at each grid time.
    ///
    /// Entry `i` drives the step `[t_{i-1}, t_i)` and equals the rain shifted by
    /// `lag`, linearly interpolated at `t_{i-1} - lag`.
    pub fn lagged_input(&self, lag: f64) -> Vec<f64> {
        let dt = self.rain.step();
        (0..self.rain.len())
            .map(|i| self.rain.interpolate(self.rain.time(i) - dt - lag))
            .collect()
    }

    pub fn replica(&self, theta: &[f64], aux: &AuxiliaryParameters) -> Result<Replica> {
        let agg = self.mapping.aggregates(theta)?;
        Ok(Replica {
            kappa: release_rate(aux, &agg)?,
            gain: output_gain(aux, &agg),
        })
    }

    /// Linear-model flow for parameters `theta`.
    pub fn simulate(&self, theta: &[f64], aux: &AuxiliaryParameters) -> Result<TimeSeries> {
        let replica = self.replica(theta, aux)?;
        let input = self.lagged_input(aux.t0);
        let values = respond(replica, &input, self.dt());
        self.rain.with_values(values)
    }
}

/// Flow of one replica for a precomputed input.
pub(crate) fn respond(replica: Replica, input: &[f64], dt: f64) -> Vec<f64> {
    let phi = (replica.kappa * dt).exp();
    let drive = step_drive(replica.kappa, dt);
    let mut d = 0.0;
    input
        .iter()
        .map(|&u| {
            d = phi * d + drive * u;
            replica.gain * d
        })
        .collect()
}

/// Free-function form of [`LinearPriorModel::simulate`].
pub fn simulate_linear(model: &LinearPriorModel, theta: &[f64], aux: &AuxiliaryParameters) -> Result<TimeSeries> {
    model.simulate(theta, aux)
}

fn check_design(design: &DesignSet, model: &LinearPriorModel, min_points: usize) -> Result<()> {
    if design.len() < min_points || !design.has_outputs() {
        return Err(Error::invalid(format!(
            "design needs at least {min_points} points with outputs, has {} points and {} outputs",
            design.len(),
            design.outputs().len()
        )));
    }
    for out in design.outputs() {
        model.rain().check_same_grid(out, "design output vs rain")?;
        if out.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design outputs must be finite"));
        }
    }
    Ok(())
}

/// Sum of squares between design outputs and linear-model outputs.
struct SumOfSquares<'a> {
    model: &'a LinearPriorModel,
    design: &'a DesignSet,
    aggregates: Vec<CatchmentAggregates>,
    template: AuxiliaryParameters,
    /// Total sum of squares of the design outputs, used to normalize.
    scale: f64,
}

impl<'a> SumOfSquares<'a> {
    fn new(model: &'a LinearPriorModel, design: &'a DesignSet, template: AuxiliaryParameters) -> Result<Self> {
        let aggregates = design
            .points()
            .iter()
            .map(|p| model.mapping().aggregates(p))
            .collect::<Result<Vec<_>>>()?;
        let scale: f64 = design.outputs().iter().flat_map(|o| o.values()).map(|v| v * v).sum();
        Ok(Self {
            model,
            design,
            aggregates,
            template,
            scale: if scale > 0.0 { scale } else { 1.0 },
        })
    }

    fn aux_from(&self, x: &[f64]) -> AuxiliaryParameters {
        AuxiliaryParameters {
            k: x[0].exp(),
            t0: x[1].abs(),
            area: x[2].exp(),
            ..self.template
        }
    }

    fn ssq(&self, aux: &AuxiliaryParameters) -> f64 {
        let input = self.model.lagged_input(aux.t0);
        let dt = self.model.dt();
        let mut total = 0.0;
        for (agg, out) in self.aggregates.iter().zip(self.design.outputs()) {
            let replica = Replica {
                kappa: release_rate(aux, agg).expect("validated aggregates"),
                gain: output_gain(aux, agg),
            };
            let z = respond(replica, &input, dt);
            total += out.values().iter().zip(&z).map(|(y, z)| (y - z) * (y - z)).sum::<f64>();
        }
        total
    }
}

impl CostFunction for SumOfSquares<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> Result<f64, ArgminError> {
        let value = self.ssq(&self.aux_from(x)) / self.scale;
        Ok(if value.is_finite() { value } else { f64::MAX })
    }
}

/// Settings for [`estimate_aux`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxEstimation {
    pub starts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for AuxEstimation {
    fn default() -> Self {
        Self {
            starts: 5,
            max_iters: 4000,
            seed: 0,
        }
    }
}

/// Fit `(k, t0, A)` by least squares between linear-model runs and design outputs.
///
/// Nelder-Mead on `(ln k, t0, ln A)` from `init` plus seeded perturbed starts;
/// each start is polished once by a restart at its optimum. `gamma` and `sigma`
/// are copied from `init`.
pub fn estimate_aux(
    design: &DesignSet,
    model: &LinearPriorModel,
    init: &AuxiliaryParameters,
    settings: &AuxEstimation,
) -> Result<AuxiliaryParameters> {
    check_design(design, model, 1)?;
    init.validate()?;
    let problem = SumOfSquares::new(model, design, *init)?;
    let dt = model.dt();
    let x0 = vec![init.k.ln(), init.t0, init.area.ln()];
    let init_cost = problem.cost(&x0).unwrap_or(f64::MAX);
    if init_cost == 0.0 {
        return Ok(*init);
    }

    let mut rng = rng::stream(settings.seed, "aux-estimation");
    let jitter = Normal::new(0.0, 0.7).expect("valid normal");
    let mut starts = vec![x0.clone()];
    for _ in 1..settings.starts.max(1) {
        starts.push(vec![
            x0[0] + jitter.sample(&mut rng),
            rng.random_range(0.0..3.0 * dt),
            x0[2] + jitter.sample(&mut rng),
        ]);
    }

    let run = |start: &[f64]| -> Result<(Vec<f64>, f64, bool), ArgminError> {
        let mut x = start.to_vec();
        let mut converged = false;
        let mut cost = f64::MAX;
        // two passes: the second restarts the simplex around the first optimum
        for pass in 0..2 {
            let steps = if pass == 0 {
                [0.5, dt, 0.5]
            } else {
                [0.05, 0.1 * dt, 0.05]
            };
            let mut simplex = vec![x.clone()];
            for (j, h) in steps.iter().enumerate() {
                let mut v = x.clone();
                v[j] += h;
                simplex.push(v);
            }
            let solver = NelderMead::new(simplex).with_sd_tolerance(1e-15)?;
            let res = Executor::new(
                SumOfSquares::new(model, design, *init).map_err(|e| ArgminError::msg(e.to_string()))?,
                solver,
            )
            .configure(|s| s.max_iters(settings.max_iters))
            .run()?;
            let state = res.state();
            if let Some(best) = state.get_best_param() {
                x = best.clone();
                cost = state.get_best_cost();
            }
            converged = matches!(state.get_termination_reason(), Some(TerminationReason::SolverConverged));
        }
        Ok((x, cost, converged))
    };

    let mut results = Vec::with_capacity(starts.len());
    for (i, s) in starts.iter().enumerate() {
        match run(s) {
            Ok((x, cost, converged)) => results.push((i, x, cost, converged)),
            Err(e) => log::warn!("aux estimation start {i} failed: {e}"),
        }
    }
    // deterministic merge: lowest objective, ties by start index
    results.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let Some((_, best_x, best_cost, _)) = results.first().cloned() else {
        return Err(Error::EstimationFailed {
            message: "every optimizer start failed".into(),
            best: *init,
            objective: init_cost,
        });
    };
    let best = problem.aux_from(&best_x);
    let best = if best_cost <= init_cost { best } else { *init };
    if !results.iter().any(|r| r.3) {
        return Err(Error::EstimationFailed {
            message: format!("no start converged within {} iterations", settings.max_iters),
            best,
            objective: best_cost.min(init_cost),
        });
    }
    Ok(best)
}

/// Sum of squared residuals between design outputs and the linear model at `aux`.
pub fn design_ssq(design: &DesignSet, model: &LinearPriorModel, aux: &AuxiliaryParameters) -> Result<f64> {
    check_design(design, model, 1)?;
    Ok(SumOfSquares::new(model, design, *aux)?.ssq(aux))
}

/// Data-driven starting point for [`estimate_aux`].
///
/// `A` follows from the volume balance `V = A r P`, `k` from matching the
/// reservoir time constant to the lag between rain and flow centroids.
pub fn initial_aux_guess(design: &DesignSet, model: &LinearPriorModel, gamma: f64) -> Result<AuxiliaryParameters> {
    check_design(design, model, 1)?;
    let rain = model.rain();
    let dt = rain.step();
    let rain_depth: f64 = rain.values().iter().sum::<f64>() * dt;
    let centroid = |s: &[f64], offset: f64| -> Option<f64> {
        let total: f64 = s.iter().sum();
        (total > 0.0).then(|| {
            s.iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + offset) * dt * v)
                .sum::<f64>()
                / total
        })
    };
    // rain[i] falls over [t_i, t_{i+1})
    let rain_centroid = centroid(rain.values(), 0.5);
    let mut areas = Vec::new();
    let mut ks = Vec::new();
    for (p, out) in design.points().iter().zip(design.outputs()) {
        let agg = model.mapping().aggregates(p)?;
        let volume: f64 = out.values().iter().sum::<f64>() * dt;
        if volume <= 0.0 || rain_depth <= 0.0 {
            continue;
        }
        let area = volume / (agg.imperviousness * rain_depth);
        let (Some(rc), Some(oc)) = (rain_centroid, centroid(out.values(), 0.0)) else {
            continue;
        };
        let lag = (oc - rc).max(dt);
        // |kappa| = 1 / lag  =>  k = A n r / (w sqrt(s) lag)
        let k = area * agg.roughness * agg.imperviousness / (agg.width * agg.slope.sqrt() * lag);
        areas.push(area.ln());
        ks.push(k.ln());
    }
    if areas.is_empty() {
        return Err(Error::invalid(
            "design outputs carry no volume; cannot guess auxiliary parameters",
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AuxiliaryParameters {
        k: mean(&ks).exp(),
        t0: 0.0,
        area: mean(&areas).exp(),
        gamma,
        sigma: 0.0,
    })
}

/// Noise scale `sigma` of the coupled system from the design residuals.
///
/// `sigma^2 = (y - z)^T S^-1 (y - z) / (n N_t)` with `S` the design-replica
/// covariance at unit noise. The quadratic form is accumulated from whitened
/// state innovations; see [`crate::emulator::DesignStructure`].
pub fn estimate_sigma(design: &DesignSet, model: &LinearPriorModel, aux: &AuxiliaryParameters) -> Result<f64> {
    check_design(design, model, 1)?;
    let structure = crate::emulator::DesignStructure::new(design, model, aux)?;
    Ok(structure.sigma_estimate())
}

//! Nonlinear toy catchment standing in for a full stormwater model.
//!
//! Rain falls on the impervious part `A r` of the catchment; rain on the
//! pervious part is lost. The impervious surface has two subareas:
//!
//! ```text
//! h1' = p - a h1^(5/3)                     no depression storage (fraction f)
//! h2' = p - a (h2 - D)_+^(5/3)             depression storage D (fraction 1 - f)
//! h3' = R - a_p (h3 - D_p)_+^(5/3) - i     pervious pond fed by run-on R
//! V'  = A r (f q1 + (1 - phi)(1 - f) q2) + A (1 - r) q3 - V / T
//! Q   = V / T
//! ```
//!
//! with `a = W sqrt(S) / (n A)`, `a_p` the same with the pervious roughness,
//! `R = phi (1 - f) A r q2 / (A (1 - r))` the share of the storage subarea
//! runoff routed onto the pervious area, and `i` a capped infiltration rate.
//! Integration is classical RK4 with a fixed number of sub-steps per grid step.
//! Rain value `j` falls over `[t_j, t_{j+1})` and the state is at rest one step
//! before the first output.

use std::time::Duration;

use crate::design::{Dimension, ParameterSpace};
use crate::error::{Error, Result, SimulatorError};
use crate::prior_model::{CatchmentAggregates, IMPERVIOUSNESS_PARAM, ROUGHNESS_PARAM, SLOPE_PARAM, WIDTH_PARAM};
use crate::series::TimeSeries;

use super::Simulator;

pub const STORAGE_IMP_PARAM: &str = "storage_imp";
pub const STORAGE_PER_PARAM: &str = "storage_per";
pub const NO_STORAGE_PARAM: &str = "imp_wo_storage";
pub const PIPE_ROUGHNESS_PARAM: &str = "n_con";

/// Scaling-factor classes in the conventional order with their feasible ranges.
pub const PARAMETER_CLASSES: [(&str, f64, f64); 8] = [
    (IMPERVIOUSNESS_PARAM, 0.5, 1.1),
    (WIDTH_PARAM, 0.5, 1.5),
    (SLOPE_PARAM, 0.5, 1.5),
    (STORAGE_IMP_PARAM, 0.5, 1.5),
    (ROUGHNESS_PARAM, 0.5, 1.5),
    (STORAGE_PER_PARAM, 0.5, 1.5),
    (NO_STORAGE_PARAM, 1.0, 1.5),
    (PIPE_ROUGHNESS_PARAM, 0.5, 1.5),
];

/// The first `count` parameter classes (2, 4 or 8 in the standard problems).
pub fn toy_space(count: usize) -> Result<ParameterSpace> {
    if count == 0 || count > PARAMETER_CLASSES.len() {
        return Err(Error::Unsupported(format!(
            "toy catchment has 1 to {} parameters, requested {count}",
            PARAMETER_CLASSES.len()
        )));
    }
    ParameterSpace::new(
        PARAMETER_CLASSES[..count]
            .iter()
            .map(|&(name, lo, hi)| Dimension::new(name, lo, hi))
            .collect(),
    )
}

/// Catchment constants; every parameter class scales one of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConstants {
    /// Total area (m^2).
    pub area: f64,
    pub imperviousness: f64,
    /// Overland flow width (m).
    pub width: f64,
    pub slope: f64,
    /// Impervious Manning roughness (s m^-1/3).
    pub n_imp: f64,
    pub n_per: f64,
    /// Depression storage heights (m).
    pub storage_imp: f64,
    pub storage_per: f64,
    /// Impervious fraction without depression storage.
    pub no_storage_fraction: f64,
    /// Share of storage-subarea runoff routed onto the pervious area.
    pub run_on: f64,
    /// Infiltration capacity of the pervious pond (m/s).
    pub infiltration: f64,
    /// Pipe reservoir time constant at unit roughness scaling (s).
    pub pipe_time: f64,
}

impl Default for ToyConstants {
    fn default() -> Self {
        Self {
            area: 1.628e6,
            imperviousness: 0.36,
            width: 3600.0,
            slope: 0.114,
            n_imp: 0.12,
            n_per: 0.24,
            storage_imp: 0.002,
            storage_per: 0.002,
            no_storage_fraction: 0.19,
            run_on: 0.3,
            infiltration: 5.0 / 3.6e6,
            pipe_time: 900.0,
        }
    }
}

/// Toy simulator bound to a rain series (m/s) and a parameter layout.
#[derive(Debug, Clone)]
pub struct ToyCatchment {
    pub constants: ToyConstants,
    names: Vec<String>,
    rain: TimeSeries,
    pub substeps: usize,
    /// Artificial wall-clock delay per run, to mimic a slow simulator.
    pub delay: Option<Duration>,
}

struct Scaled {
    area_imp: f64,
    area_per: f64,
    a_imp: f64,
    a_per: f64,
    storage_imp: f64,
    storage_per: f64,
    no_storage: f64,
    run_on: f64,
    infiltration: f64,
    pipe_time: f64,
}

impl ToyCatchment {
    pub fn new(space: &ParameterSpace, rain: TimeSeries) -> Result<Self> {
        for name in space.names() {
            if !PARAMETER_CLASSES.iter().any(|c| c.0 == name) {
                return Err(Error::invalid(format!("toy catchment has no parameter `{name}`")));
            }
        }
        if rain.values().iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("rain must be non-negative"));
        }
        Ok(Self {
            constants: ToyConstants::default(),
            names: space.names().into_iter().map(String::from).collect(),
            rain,
            substeps: 6,
            delay: None,
        })
    }

    pub fn rain(&self) -> &TimeSeries {
        &self.rain
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Base aggregates for the linear prior model.
    pub fn aggregates(&self) -> CatchmentAggregates {
        CatchmentAggregates {
            width: self.constants.width,
            slope: self.constants.slope,
            roughness: self.constants.n_imp,
            imperviousness: self.constants.imperviousness,
        }
    }

    fn scale(&self, theta: &[f64], name: &str) -> f64 {
        self.names.iter().position(|n| n == name).map_or(1.0, |i| theta[i])
    }

    fn scaled(&self, theta: &[f64]) -> std::result::Result<Scaled, SimulatorError> {
        if theta.len() != self.names.len() {
            return Err(SimulatorError::Protocol(format!(
                "expected {} parameters, got {}",
                self.names.len(),
                theta.len()
            )));
        }
        if let Some(x) = theta.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(SimulatorError::Failed {
                message: format!("scaling factors must be positive, got {x}"),
                output: String::new(),
            });
        }
        let c = &self.constants;
        let r = (c.imperviousness * self.scale(theta, IMPERVIOUSNESS_PARAM)).min(0.99);
        let width = c.width * self.scale(theta, WIDTH_PARAM);
        let slope = c.slope * self.scale(theta, SLOPE_PARAM);
        let conveyance = width * slope.sqrt() / c.area;
        Ok(Scaled {
            area_imp: c.area * r,
            area_per: c.area * (1.0 - r),
            a_imp: conveyance / (c.n_imp * self.scale(theta, ROUGHNESS_PARAM)),
            a_per: conveyance / c.n_per,
            storage_imp: c.storage_imp * self.scale(theta, STORAGE_IMP_PARAM),
            storage_per: c.storage_per * self.scale(theta, STORAGE_PER_PARAM),
            no_storage: (c.no_storage_fraction * self.scale(theta, NO_STORAGE_PARAM)).min(1.0),
            run_on: c.run_on,
            infiltration: c.infiltration,
            pipe_time: c.pipe_time * self.scale(theta, PIPE_ROUGHNESS_PARAM),
        })
    }

    /// Run the catchment with an explicit sub-step count.
    pub fn simulate_with(&self, theta: &[f64], substeps: usize) -> std::result::Result<TimeSeries, SimulatorError> {
        let s = self.scaled(theta)?;
        let substeps = substeps.max(1);
        let dt = self.rain.step();
        let h = dt / substeps as f64;
        let outflow = |x: f64, d: f64, a: f64| a * (x - d).max(0.0).powf(5.0 / 3.0);
        let deriv = |x: &[f64; 4], p: f64| -> [f64; 4] {
            let q1 = outflow(x[0], 0.0, s.a_imp);
            let q2 = outflow(x[1], s.storage_imp, s.a_imp);
            let q3 = outflow(x[2], s.storage_per, s.a_per);
            let run_on = s.run_on * (1.0 - s.no_storage) * s.area_imp * q2 / s.area_per;
            // smooth cut-off of infiltration as the pond empties
            let infil = s.infiltration * (x[2].max(0.0) / 1e-4).min(1.0);
            let inflow =
                s.area_imp * (s.no_storage * q1 + (1.0 - s.run_on) * (1.0 - s.no_storage) * q2) + s.area_per * q3;
            [p - q1, p - q2, run_on - q3 - infil, inflow - x[3] / s.pipe_time]
        };
        let mut x = [0.0f64; 4];
        let mut out = Vec::with_capacity(self.rain.len());
        out.push(0.0);
        for &p in &self.rain.values()[..self.rain.len() - 1] {
            for _ in 0..substeps {
                let k1 = deriv(&x, p);
                let k2 = deriv(&std::array::from_fn(|i| x[i] + 0.5 * h * k1[i]), p);
                let k3 = deriv(&std::array::from_fn(|i| x[i] + 0.5 * h * k2[i]), p);
                let k4 = deriv(&std::array::from_fn(|i| x[i] + h * k3[i]), p);
                for i in 0..4 {
                    x[i] = (x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).max(0.0);
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SimulatorError::Unstable(format!("non-finite state at {theta:?}")));
            }
            out.push(x[3] / s.pipe_time);
        }
        self.rain
            .with_values(out)
            .map_err(|e| SimulatorError::Protocol(e.to_string()))
    }
}

impl Simulator for ToyCatchment {
    fn simulate(&self, theta: &[f64]) -> std::result::Result<TimeSeries, SimulatorError> {
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        self.simulate_with(theta, self.substeps)
    }
}

/// Free-function form: the toy catchment with default constants.
pub fn toy_simulate(space: &ParameterSpace, theta: &[f64], rain: &TimeSeries) -> Result<TimeSeries> {
    Ok(ToyCatchment::new(space, rain.clone())?.simulate(theta)?)
}

/// A two-burst storm (m/s) on a grid of `steps` points spaced `dt` seconds.
///
/// Peaks of 24 and 14 mm/h at 50 and 120 minutes, ending after 160 minutes.
pub fn synthetic_rain(steps: usize, dt: f64) -> Result<TimeSeries> {
    let mm_h = 1.0 / 3.6e6;
    let burst = |t: f64, peak: f64, center: f64, half: f64| peak * (1.0 - ((t - center) / half).abs()).max(0.0);
    let values = (0..steps)
        .map(|i| {
            let t = i as f64 * dt / 60.0;
            (burst(t, 24.0, 50.0, 35.0) + burst(t, 14.0, 120.0, 40.0)) * mm_h
        })
        .collect();
    TimeSeries::new(0.0, dt, values)
}

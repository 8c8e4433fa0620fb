//! Posterior sampling for a calibration problem, with any model evaluator.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::ParameterSpace;
use crate::error::{Error, Result};
use crate::likelihood::{log_target, split_sampling_vector, LikelihoodContext, PriorSpec};
use crate::rng::Rng;
use crate::sampler::{
    default_walkers, flat_sample_with_log_probs, init_ball, run_ensemble, thinning_interval, EnsembleState,
    DEFAULT_BURN_IN_FRACTION, DEFAULT_SCALE, DEFAULT_STEPS,
};

/// Everything the log-posterior needs apart from the model evaluator.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub space: ParameterSpace,
    pub prior: PriorSpec,
    pub context: LikelihoodContext,
}

impl CalibrationProblem {
    pub fn new(space: ParameterSpace, prior: PriorSpec, context: LikelihoodContext) -> Result<Self> {
        prior.validate()?;
        if prior.params.len() != space.len() {
            return Err(Error::invalid(format!(
                "{} priors for {} parameters",
                prior.params.len(),
                space.len()
            )));
        }
        Ok(Self { space, prior, context })
    }

    /// Column names of posterior samples.
    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.space.names().into_iter().map(String::from).collect();
        names.push("sigma_E".into());
        names.push("sigma_B".into());
        names
    }

    /// Log-posterior in sampling coordinates `(theta, ln sigma_E, ln sigma_B)`.
    pub fn log_target<F>(&self, x: &[f64], model: &F) -> f64
    where
        F: Fn(&[f64]) -> Result<Vec<f64>>,
    {
        log_target(x, &self.prior, &self.context, model)
    }

    /// Starting point: prior modes and prior-scale noise levels.
    fn init_center(&self) -> (Vec<f64>, Vec<f64>) {
        let mut center: Vec<f64> = self.prior.params.iter().map(|p| p.mode).collect();
        let mut scales: Vec<f64> = self.prior.params.iter().map(|p| 0.05 * (p.upper - p.lower)).collect();
        let se2 = self.prior.sigma_e2.mean.max(self.prior.sigma_e2.sd);
        center.push(0.5 * se2.ln());
        center.push(0.5 * (0.5 / self.prior.sigma_b2.rate).ln());
        scales.extend([0.3, 0.3]);
        (center, scales)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    /// Ensemble size; `None` picks `max(2d, 16)`.
    pub walkers: Option<usize>,
    pub steps: usize,
    pub burn_in_fraction: f64,
    /// Thinning interval; `None` uses the integrated autocorrelation time.
    pub thin: Option<usize>,
    pub stretch_scale: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            walkers: None,
            steps: DEFAULT_STEPS,
            burn_in_fraction: DEFAULT_BURN_IN_FRACTION,
            thin: None,
            stretch_scale: DEFAULT_SCALE,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid("sampler needs at least 2 steps"));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::invalid("burn-in fraction must lie in [0, 1)"));
        }
        if self.thin == Some(0) {
            return Err(Error::invalid("thinning interval must be at least 1"));
        }
        if !(self.stretch_scale > 1.0) {
            return Err(Error::invalid("stretch scale must exceed 1"));
        }
        Ok(())
    }
}

/// Retained posterior states on the natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub names: Vec<String>,
    /// Rows of `(theta, sigma_E, sigma_B)`.
    pub points: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: f64,
    pub evaluations: usize,
    pub thin: usize,
    /// Final ensemble in sampling coordinates, for warm starts.
    pub final_walkers: Vec<Vec<f64>>,
}

impl PosteriorSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Model-parameter part of every row.
    pub fn parameters(&self) -> Vec<Vec<f64>> {
        let d = self.names.len() - 2;
        self.points.iter().map(|p| p[..d].to_vec()).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.names.join(",");
        out.push_str(",log_posterior\n");
        for (p, lp) in self.points.iter().zip(&self.log_posterior) {
            for v in p {
                write!(out, "{v},").expect("write to string");
            }
            writeln!(out, "{lp}").expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Read a posterior CSV; the last column must be `log_posterior`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(path, e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.len() < 2 || headers.last().map(String::as_str) != Some("log_posterior") {
            return Err(Error::parse(path, "expected header ending in `log_posterior`"));
        }
        let width = headers.len() - 1;
        let mut points = Vec::new();
        let mut lps = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", row + 1)))?;
            let values = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, format!("row {}: {e}", row + 1)))?;
            if values.len() != headers.len() {
                return Err(Error::parse(path, format!("row {}: wrong field count", row + 1)));
            }
            lps.push(values[width]);
            points.push(values[..width].to_vec());
        }
        if points.is_empty() {
            return Err(Error::parse(path, "no samples"));
        }
        Ok(Self {
            names: headers[..width].to_vec(),
            points,
            log_posterior: lps,
            acceptance_rate: f64::NAN,
            evaluations: 0,
            thin: 1,
            final_walkers: Vec::new(),
        })
    }
}

/// Run the ensemble sampler against `model` and collect the posterior sample.
///
/// `warm_start` replaces the default initial ensemble (sampling coordinates).
pub fn infer<F>(
    problem: &CalibrationProblem,
    model: F,
    settings: &SamplerSettings,
    mut rng: Rng,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<PosteriorSample>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    settings.validate()?;
    let dim = problem.space.len() + 2;
    let walkers = settings.walkers.unwrap_or_else(|| default_walkers(dim));
    let target = |x: &[f64]| problem.log_target(x, &model);
    let init = match warm_start {
        Some(w) if w.len() == walkers && w.iter().all(|p| p.len() == dim) => w.to_vec(),
        _ => {
            let (center, scales) = problem.init_center();
            init_ball(&center, &scales, walkers, &mut rng, &target, 200)
        }
    };
    let mut state = EnsembleState::new(init, &target, rng)?;
    let chain = run_ensemble(&target, &mut state, settings.steps, settings.stretch_scale)?;
    let burn_in = (settings.steps as f64 * settings.burn_in_fraction).floor() as usize;
    let thin = settings
        .thin
        .unwrap_or_else(|| thinning_interval(&chain, burn_in))
        .clamp(1, settings.steps - burn_in);
    let (raw, lps) = flat_sample_with_log_probs(&chain, burn_in, thin)?;
    let mut points = Vec::with_capacity(raw.len());
    let mut log_posterior = Vec::with_capacity(raw.len());
    for (x, lp) in raw.iter().zip(lps) {
        let (theta, err) = split_sampling_vector(x, problem.prior.tau, problem.context.lambda());
        let mut row = theta.to_vec();
        row.push(err.sigma_e);
        row.push(err.sigma_b);
        points.push(row);
        // report the density of the natural-scale parameters
        let jacobian = 2.0 * std::f64::consts::LN_2 + 2.0 * (x[dim - 2] + x[dim - 1]);
        log_posterior.push(lp - jacobian);
    }
    Ok(PosteriorSample {
        names: problem.column_names(),
        points,
        log_posterior,
        acceptance_rate: chain.acceptance_rate(),
        evaluations: walkers * (settings.steps + 1),
        thin,
        final_walkers: state.walkers().to_vec(),
    })
}

//! Run configuration: a single strict JSON document.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Rain is read in mm/h and converted to m/s; flows are in m^3/s.

use std::path::{Path, PathBuf};

use mechemu_core::design::{Dimension, DEFAULT_OVERREACH, DEFAULT_STRETCH};
use mechemu_core::inference::{CalibrationProblem, SamplerSettings};
use mechemu_core::likelihood::{
    recession_tau, BetaPrior, Exponential, LikelihoodContext, PriorSpec, TruncatedNormal, DEFAULT_LAMBDA,
};
use mechemu_core::prior_model::DEFAULT_GAMMA;
use mechemu_core::refinement::{RefinementSettings, DEFAULT_SUBSAMPLE, DEFAULT_THRESHOLD};
use mechemu_core::rng;
use mechemu_core::simulators::external::ExternalSimulator;
use mechemu_core::simulators::toy::ToyCatchment;
use mechemu_core::simulators::{make_observation, ExternalSimulatorSpec, Simulator};
use mechemu_core::{
    AggregateMapping, CatchmentAggregates, ErrorModelParams, LinearPriorModel, ParameterSpace, TimeSeries,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

const MM_PER_HOUR: f64 = 1.0 / 3.6e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Rain series, `time_s,value` in mm/h.
    pub rain: PathBuf,
    /// Observed flow file, or a synthetic ground-truth experiment.
    #[serde(default)]
    pub observations: Option<Observations>,
    /// Run directory; `--out` overrides it.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub parameters: Vec<ParameterConfig>,
    /// Base aggregates of the linear prior model; the toy simulator supplies
    /// its own when omitted.
    #[serde(default)]
    pub aggregates: Option<CatchmentAggregates>,
    #[serde(default)]
    pub error_model: ErrorModelConfig,
    #[serde(default)]
    pub emulator: EmulatorConfig,
    /// Total simulator budget `n`, a multiple of 8.
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub seed: u64,
    pub simulator: SimulatorConfig,
    /// Optional reference posterior CSV for diagnostics.
    #[serde(default)]
    pub reference_posterior: Option<PathBuf>,
    /// Unit label for flows in reports.
    #[serde(default = "default_units")]
    pub flow_units: String,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

fn default_budget() -> usize {
    128
}

fn default_units() -> String {
    "m3/s".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observations {
    File(PathBuf),
    Synthetic(SyntheticObservations),
}

/// Ground truth: observations drawn around the simulator output at `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticObservations {
    pub theta: Vec<f64>,
    pub sigma_e: f64,
    pub sigma_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    /// Prior mode; defaults to 1 when inside the bounds, else the midpoint.
    #[serde(default)]
    pub mode: Option<f64>,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
}

fn default_concentration() -> f64 {
    6.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauRule {
    /// One third of the recession time of the observed hydrograph.
    Recession,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSetting {
    Seconds(f64),
    Rule(TauRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModelConfig {
    pub lambda: f64,
    pub tau: TauSetting,
    pub sigma_e2_prior: NormalPrior,
    pub sigma_b2_rate: f64,
}

impl Default for ErrorModelConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            tau: TauSetting::Rule(TauRule::Recession),
            sigma_e2_prior: NormalPrior {
                mean: 0.0025,
                sd: 0.0025,
            },
            sigma_b2_rate: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorConfig {
    pub gamma: f64,
    pub overreach: f64,
    pub halton_skip: u64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            overreach: DEFAULT_OVERREACH,
            halton_skip: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub stretch: f64,
    pub subsample: usize,
    pub threshold: f64,
    pub max_attempts: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            stretch: DEFAULT_STRETCH,
            subsample: DEFAULT_SUBSAMPLE,
            threshold: DEFAULT_THRESHOLD,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SimulatorConfig {
    Toy {
        /// Artificial delay per run in milliseconds.
        #[serde(default)]
        delay_ms: u64,
    },
    External(ExternalSimulatorSpec),
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate()?;
        Ok((config, base))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.parameters.is_empty() {
            return Err(config_error("at least one parameter is required"));
        }
        if self.budget == 0 || !self.budget.is_multiple_of(8) {
            return Err(config_error(format!(
                "budget must be a positive multiple of 8, got {}",
                self.budget
            )));
        }
        self.sampler.validate().map_err(|e| config_error(e.to_string()))?;
        if let SimulatorConfig::External(spec) = &self.simulator {
            spec.validate().map_err(|e| config_error(e.to_string()))?;
            if self.aggregates.is_none() {
                return Err(config_error(
                    "an external simulator needs `aggregates` for the prior model",
                ));
            }
        }
        if let Some(Observations::Synthetic(s)) = &self.observations {
            if s.theta.len() != self.parameters.len() {
                return Err(config_error("synthetic `theta` must have one value per parameter"));
            }
        }
        Ok(())
    }
}

/// Everything a command needs, built from a validated config.
pub struct Setup {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub space: ParameterSpace,
    pub rain: TimeSeries,
    pub simulator: Box<dyn Simulator>,
    pub model: LinearPriorModel,
    base: PathBuf,
}

impl Setup {
    pub fn new(config: RunConfig, base: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let out_dir = out.unwrap_or_else(|| resolve(&base, &config.output_dir));
        let seed = seed.unwrap_or(config.seed);
        let space = ParameterSpace::new(
            config
                .parameters
                .iter()
                .map(|p| Dimension::new(p.name.clone(), p.lower, p.upper))
                .collect(),
        )
        .map_err(|e| config_error(e.to_string()))?;

        let rain_path = resolve(&base, &config.rain);
        if !rain_path.exists() {
            return Err(config_error(format!(
                "rain file {} does not exist",
                rain_path.display()
            )));
        }
        let rain_mm = TimeSeries::read_csv(&rain_path).map_err(|e| config_error(e.to_string()))?;
        let rain = rain_mm
            .with_values(rain_mm.values().iter().map(|v| v * MM_PER_HOUR).collect())
            .map_err(|e| config_error(e.to_string()))?;

        let (simulator, aggregates): (Box<dyn Simulator>, CatchmentAggregates) = match &config.simulator {
            SimulatorConfig::Toy { delay_ms } => {
                let mut toy = ToyCatchment::new(&space, rain.clone()).map_err(|e| config_error(e.to_string()))?;
                if *delay_ms > 0 {
                    toy.delay = Some(std::time::Duration::from_millis(*delay_ms));
                }
                let agg = config.aggregates.unwrap_or_else(|| toy.aggregates());
                (Box::new(toy), agg)
            }
            SimulatorConfig::External(spec) => {
                let mut spec = spec.clone();
                spec.working_dir = spec.working_dir.map(|d| resolve(&base, &d));
                let names = space.names().into_iter().map(String::from).collect();
                let sim =
                    ExternalSimulator::new(spec, names, rain.zeros_like()).map_err(|e| config_error(e.to_string()))?;
                (Box::new(sim), config.aggregates.expect("validated"))
            }
        };
        let mapping = AggregateMapping::from_space(aggregates, &space).map_err(|e| config_error(e.to_string()))?;
        let model = LinearPriorModel::new(mapping, rain.clone()).map_err(|e| config_error(e.to_string()))?;
        Ok(Self {
            config,
            out_dir,
            seed,
            space,
            rain,
            simulator,
            model,
            base,
        })
    }

    /// Resolve a config-relative path.
    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }

    pub fn design_dir(&self) -> PathBuf {
        self.out_dir.join("design")
    }

    /// Observed flows, drawing and saving synthetic ones when configured.
    pub fn observations(&self) -> Result<TimeSeries, CliError> {
        match &self.config.observations {
            None => Err(config_error("this command needs `observations` in the config")),
            Some(Observations::File(p)) => {
                let path = self.path(p);
                if !path.exists() {
                    return Err(config_error(format!(
                        "observation file {} does not exist",
                        path.display()
                    )));
                }
                let obs = TimeSeries::read_csv(&path).map_err(|e| config_error(e.to_string()))?;
                obs.check_same_grid(&self.rain, "observations vs rain")
                    .map_err(|e| config_error(e.to_string()))?;
                Ok(obs)
            }
            Some(Observations::Synthetic(s)) => {
                let clean = self.simulator.simulate(&s.theta)?;
                let tau = self.tau_for(&clean)?;
                let err = ErrorModelParams {
                    sigma_e: s.sigma_e,
                    sigma_b: s.sigma_b,
                    tau,
                    lambda: self.config.error_model.lambda,
                };
                let mut rng = rng::stream(self.seed, rng::OBSERVATION);
                let obs = make_observation(self.simulator.as_ref(), &s.theta, &err, &mut rng)?;
                std::fs::create_dir_all(&self.out_dir)
                    .map_err(|e| CliError::Io(format!("{}: {e}", self.out_dir.display())))?;
                obs.series.write_csv(self.out_dir.join("observations.csv"))?;
                Ok(obs.series)
            }
        }
    }

    fn tau_for(&self, flow: &TimeSeries) -> Result<f64, CliError> {
        match self.config.error_model.tau {
            TauSetting::Seconds(t) if t > 0.0 => Ok(t),
            TauSetting::Seconds(t) => Err(config_error(format!("tau must be positive, got {t}"))),
            TauSetting::Rule(TauRule::Recession) => Ok(recession_tau(flow)?),
        }
    }

    pub fn prior(&self, observed: &TimeSeries) -> Result<PriorSpec, CliError> {
        let em = &self.config.error_model;
        let params = self
            .config
            .parameters
            .iter()
            .map(|p| {
                let mode = p.mode.unwrap_or(if p.lower < 1.0 && 1.0 < p.upper {
                    1.0
                } else {
                    0.5 * (p.lower + p.upper)
                });
                BetaPrior::new(p.lower, p.upper, mode, p.concentration)
                    .map_err(|e| config_error(format!("prior for `{}`: {e}", p.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = PriorSpec {
            params,
            sigma_e2: TruncatedNormal {
                mean: em.sigma_e2_prior.mean,
                sd: em.sigma_e2_prior.sd,
            },
            sigma_b2: Exponential { rate: em.sigma_b2_rate },
            tau: self.tau_for(observed)?,
        };
        spec.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(spec)
    }

    pub fn problem(&self) -> Result<CalibrationProblem, CliError> {
        let observed = self.observations()?;
        let prior = self.prior(&observed)?;
        let context = LikelihoodContext::new(observed, self.config.error_model.lambda)
            .map_err(|e| config_error(e.to_string()))?;
        CalibrationProblem::new(self.space.clone(), prior, context).map_err(|e| config_error(e.to_string()))
    }

    pub fn refinement_settings(&self) -> Result<RefinementSettings, CliError> {
        let mut s = RefinementSettings::new(self.config.budget, self.seed).map_err(|e| config_error(e.to_string()))?;
        let r = &self.config.refinement;
        s.overreach = self.config.emulator.overreach;
        s.halton_skip = self.config.emulator.halton_skip;
        s.gamma = self.config.emulator.gamma;
        s.stretch = r.stretch;
        s.subsample = r.subsample;
        s.threshold = r.threshold;
        s.max_attempts = r.max_attempts.max(1);
        s.sampler = self.config.sampler;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "rain": "rain.csv",
        "parameters": [{ "name": "width", "lower": 0.5, "upper": 1.5 }],
        "simulator": { "kind": "toy" }
    }"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(c.budget, 128);
        assert_eq!(c.error_model.tau, TauSetting::Rule(TauRule::Recession));
        assert_eq!(c.emulator.gamma, 5.0);
        assert_eq!(c.refinement.subsample, 200);
        assert_eq!(c.parameters[0].concentration, 6.0);
        assert_eq!(c.simulator, SimulatorConfig::Toy { delay_ms: 0 });
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_fail_at_every_level() {
        for (from, to) in [
            (r#""rain""#, r#""extra": 1, "rain""#),
            (r#""kind": "toy""#, r#""kind": "toy", "speed": 2"#),
            (r#""lower""#, r#""lowr": 0, "lower""#),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            assert!(serde_json::from_str::<RunConfig>(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn tau_accepts_seconds_or_rule() {
        let em: ErrorModelConfig = serde_json::from_str(r#"{ "tau": 1800 }"#).unwrap();
        assert_eq!(em.tau, TauSetting::Seconds(1800.0));
        let em: ErrorModelConfig = serde_json::from_str(r#"{ "tau": "recession" }"#).unwrap();
        assert_eq!(em.tau, TauSetting::Rule(TauRule::Recession));
        assert!(serde_json::from_str::<ErrorModelConfig>(r#"{ "tau": "sometimes" }"#).is_err());
    }

    #[test]
    fn external_simulator_needs_aggregates() {
        let text = MINIMAL.replace(
            r#"{ "kind": "toy" }"#,
            r#"{ "kind": "external", "command": "run {params} {output}" }"#,
        );
        let c: RunConfig = serde_json::from_str(&text).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(m)) if m.contains("aggregates")));
    }
}

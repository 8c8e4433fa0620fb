//! Iterative design refinement and the cross-match distance between samples.
//!
//! Starting from a Halton design of half the budget, each iteration draws an
//! eighth of the budget from the current emulator posterior, stretches the
//! draw about its mean, runs the simulator there and re-conditions the
//! emulator. Successive posteriors are compared with the cross-match distance
//! `1 - 2 n_cm / n`, where `n_cm` counts the pairs of an optimal matching of the
//! pooled sample that join one point from each sample.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{sample_mean, DesignSet, Origin, ParameterVector, DEFAULT_OVERREACH, DEFAULT_STRETCH};
use crate::emulator::Emulator;
use crate::error::{Error, Result, SimulatorError};
use crate::inference::{infer, CalibrationProblem, PosteriorSample, SamplerSettings};
use crate::matching::{match_points, MatchingKind};
use crate::prior_model::{
    estimate_aux, estimate_sigma, initial_aux_guess, AuxEstimation, AuxiliaryParameters, LinearPriorModel,
};
use crate::rng::{self, Rng};
use crate::series::TimeSeries;
use crate::simulators::Simulator;

pub const DEFAULT_SUBSAMPLE: usize = 200;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
const CROSS_MATCH_STREAM: &str = "cross-match";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossMatch {
    pub distance: f64,
    pub cross_pairs: usize,
    pub kind: MatchingKind,
}

/// Cross-match statistic of two equally sized samples.
pub fn cross_match(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<CrossMatch> {
    let n = a.len();
    if n == 0 || b.len() != n {
        return Err(Error::invalid(format!(
            "cross-match needs two non-empty samples of equal size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != dim) {
        return Err(Error::invalid("samples differ in dimension"));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let m = pooled.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in &pooled {
        for (s, x) in mean.iter_mut().zip(p.iter()) {
            *s += x / m;
        }
    }
    let mut sd = vec![0.0; dim];
    for p in &pooled {
        for ((s, x), mu) in sd.iter_mut().zip(p.iter()).zip(&mean) {
            *s += (x - mu) * (x - mu) / (m - 1.0).max(1.0);
        }
    }
    let standardized: Vec<Vec<f64>> = pooled
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((x, mu), v)| if *v > 0.0 { (x - mu) / v.sqrt() } else { 0.0 })
                .collect()
        })
        .collect();
    let (mate, kind) = match_points(&standardized)?;
    let cross_pairs = (0..n).filter(|&i| mate[i] >= n).count();
    Ok(CrossMatch {
        distance: 1.0 - 2.0 * cross_pairs as f64 / n as f64,
        cross_pairs,
        kind,
    })
}

/// `1 - 2 n_cm / n` for two equally sized samples.
pub fn cross_match_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    Ok(cross_match(a, b)?.distance)
}

/// Seeded subsample without replacement, keeping the original order.
pub fn subsample(points: &[Vec<f64>], size: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    if points.len() <= size {
        return points.to_vec();
    }
    let mut idx = sample_indices(rng, points.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

/// Cross-match distance after subsampling both samples to at most `size` points.
pub fn compare_samples(a: &[Vec<f64>], b: &[Vec<f64>], size: usize, rng: &mut Rng) -> Result<CrossMatch> {
    let m = size.min(a.len()).min(b.len());
    let a = subsample(a, m, rng);
    let b = subsample(b, m, rng);
    cross_match(&a, &b)
}

/// Design sizes of the refinement loop for a total budget `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub budget: usize,
}

impl Schedule {
    pub const BATCHES: usize = 4;

    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 || !budget.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "budget must be a positive multiple of 8, got {budget}"
            )));
        }
        Ok(Self { budget })
    }

    pub fn initial(&self) -> usize {
        self.budget / 2
    }

    pub fn batch(&self) -> usize {
        self.budget / 8
    }

    /// `n/2, 5n/8, 3n/4, 7n/8, n`.
    pub fn sizes(&self) -> Vec<usize> {
        (0..=Self::BATCHES).map(|k| self.initial() + k * self.batch()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementSettings {
    pub schedule: Schedule,
    pub overreach: f64,
    pub stretch: f64,
    pub halton_skip: u64,
    pub gamma: f64,
    /// Points per sample used for cross-matching.
    pub subsample: usize,
    /// Largest final inter-iteration distance still counted as converged.
    pub threshold: f64,
    pub sampler: SamplerSettings,
    pub aux: AuxEstimation,
    /// Attempts per design point before an iteration is aborted.
    pub max_attempts: usize,
    /// Minimum separation of new design points, relative to the box spans.
    pub min_separation: f64,
    pub seed: u64,
}

impl RefinementSettings {
    pub fn new(budget: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            schedule: Schedule::new(budget)?,
            overreach: DEFAULT_OVERREACH,
            stretch: DEFAULT_STRETCH,
            halton_skip: 1,
            gamma: crate::prior_model::DEFAULT_GAMMA,
            subsample: DEFAULT_SUBSAMPLE,
            threshold: DEFAULT_THRESHOLD,
            sampler: SamplerSettings::default(),
            aux: AuxEstimation {
                seed,
                ..AuxEstimation::default()
            },
            max_attempts: 3,
            min_separation: 1e-6,
            seed,
        })
    }
}

/// Per-iteration record written to the diagnostics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub design_size: usize,
    pub d_cm_previous: Option<f64>,
    pub d_cm_reference: Option<f64>,
    pub acceptance_rate: f64,
    pub simulate_ms: f64,
    pub condition_ms: f64,
    pub mcmc_ms: f64,
}

impl IterationDiagnostics {
    pub const CSV_HEADER: &'static str =
        "iteration,design_size,d_cm_previous,d_cm_reference,acceptance_rate,simulate_ms,condition_ms,mcmc_ms";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3}",
            self.iteration,
            self.design_size,
            opt(self.d_cm_previous),
            opt(self.d_cm_reference),
            self.acceptance_rate,
            self.simulate_ms,
            self.condition_ms,
            self.mcmc_ms
        )
    }
}

/// A simulator failure that was recovered by drawing a replacement point.
#[derive(Debug, Clone)]
pub struct RecordedFailure {
    pub iteration: usize,
    pub point: ParameterVector,
    pub error: SimulatorError,
}

#[derive(Debug, Clone)]
pub struct RefinementState {
    pub design: DesignSet,
    pub model: LinearPriorModel,
    pub aux: AuxiliaryParameters,
    pub settings: RefinementSettings,
    pub posteriors: Vec<PosteriorSample>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub failures: Vec<RecordedFailure>,
    pub simulator_calls: usize,
    /// Subsampled reference posterior for diagnostics.
    reference: Option<Vec<Vec<f64>>>,
}

impl RefinementState {
    /// Inter-iteration cross-match distances.
    pub fn distances(&self) -> Vec<f64> {
        self.diagnostics.iter().filter_map(|d| d.d_cm_previous).collect()
    }

    pub fn latest(&self) -> &PosteriorSample {
        self.posteriors.last().expect("initial posterior present")
    }

    /// Converged when the last distance is within the threshold and did not grow.
    pub fn converged(&self) -> bool {
        let d = self.distances();
        match d.as_slice() {
            [] => false,
            [only] => *only <= self.settings.threshold,
            [.., prev, last] => *last <= self.settings.threshold && last <= prev,
        }
    }
}

fn millis(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Run the simulator at every point, in parallel, keeping input order.
pub fn simulate_batch(
    simulator: &dyn Simulator,
    points: &[ParameterVector],
) -> Vec<std::result::Result<TimeSeries, SimulatorError>> {
    points.par_iter().map(|p| simulator.simulate(p)).collect()
}

fn emulator_model(emulator: &Emulator) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + '_ {
    move |theta: &[f64]| {
        let mut out = Vec::new();
        emulator.predict_mean_into(theta, &mut out)?;
        Ok(out)
    }
}

/// Posterior with the emulator conditioned on `design`.
pub fn emulator_posterior(
    problem: &CalibrationProblem,
    design: &DesignSet,
    model: &LinearPriorModel,
    aux: AuxiliaryParameters,
    sampler: &SamplerSettings,
    rng: Rng,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<PosteriorSample> {
    let emulator = Emulator::build(design, model, aux)?;
    infer(problem, emulator_model(&emulator), sampler, rng, warm_start)
}

/// Posterior with the simulator itself in the likelihood.
pub fn direct_posterior(
    problem: &CalibrationProblem,
    simulator: &dyn Simulator,
    sampler: &SamplerSettings,
    rng: Rng,
) -> Result<PosteriorSample> {
    let model = |theta: &[f64]| -> Result<Vec<f64>> { Ok(simulator.simulate(theta)?.into_values()) };
    infer(problem, model, sampler, rng, None)
}

/// Halton design of `count` points with simulator outputs.
pub fn halton_design(
    problem: &CalibrationProblem,
    simulator: &dyn Simulator,
    count: usize,
    overreach: f64,
    skip: u64,
) -> Result<DesignSet> {
    let mut design = DesignSet::halton(problem.space.clone(), overreach, count, skip)?;
    let outputs = simulate_batch(simulator, design.points())
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    design.set_outputs(outputs)?;
    Ok(design)
}

/// Estimate `(k, t0, A)` and then `sigma` from a design.
pub fn estimate_auxiliary(
    design: &DesignSet,
    model: &LinearPriorModel,
    gamma: f64,
    settings: &AuxEstimation,
) -> Result<AuxiliaryParameters> {
    let init = initial_aux_guess(design, model, gamma)?;
    let init = AuxiliaryParameters { sigma: 0.0, ..init };
    let mut aux = match estimate_aux(design, model, &init, settings) {
        Ok(aux) => aux,
        Err(Error::EstimationFailed { best, message, .. }) => {
            log::warn!("{message}; continuing with the best point found");
            best
        }
        Err(e) => return Err(e),
    };
    aux.sigma = estimate_sigma(design, model, &aux)?;
    Ok(aux)
}

/// Step 1: Halton design of half the budget, auxiliary estimation, first posterior.
pub fn initial_stage(
    problem: &CalibrationProblem,
    simulator: &dyn Simulator,
    model: &LinearPriorModel,
    settings: RefinementSettings,
    reference: Option<&[Vec<f64>]>,
) -> Result<RefinementState> {
    let t = Instant::now();
    let design = halton_design(
        problem,
        simulator,
        settings.schedule.initial(),
        settings.overreach,
        settings.halton_skip,
    )?;
    let simulate_ms = millis(t);
    let t = Instant::now();
    let aux = estimate_auxiliary(&design, model, settings.gamma, &settings.aux)?;
    let condition_ms = millis(t);
    log::info!("auxiliary parameters: {aux:?}");
    let t = Instant::now();
    let posterior = emulator_posterior(
        problem,
        &design,
        model,
        aux,
        &settings.sampler,
        rng::indexed_stream(settings.seed, rng::MCMC, 0),
        None,
    )?;
    let mcmc_ms = millis(t);
    let mut crng = rng::indexed_stream(settings.seed, CROSS_MATCH_STREAM, 0);
    let reference = reference.map(|r| subsample(r, settings.subsample, &mut crng));
    let d_ref = reference
        .as_ref()
        .map(|r| compare_samples(&posterior.points, r, settings.subsample, &mut crng).map(|c| c.distance))
        .transpose()?;
    let diagnostics = vec![IterationDiagnostics {
        iteration: 0,
        design_size: design.len(),
        d_cm_previous: None,
        d_cm_reference: d_ref,
        acceptance_rate: posterior.acceptance_rate,
        simulate_ms,
        condition_ms,
        mcmc_ms,
    }];
    Ok(RefinementState {
        simulator_calls: design.len(),
        design,
        model: model.clone(),
        aux,
        settings,
        posteriors: vec![posterior],
        diagnostics,
        failures: Vec::new(),
        reference,
    })
}

/// Candidate design points drawn from the posterior without replacement.
struct Candidates {
    pool: Vec<ParameterVector>,
    order: Vec<usize>,
    next: usize,
}

impl Candidates {
    fn new(pool: Vec<ParameterVector>, rng: &mut Rng) -> Self {
        let order = sample_indices(rng, pool.len(), pool.len()).into_vec();
        Self { pool, order, next: 0 }
    }

    /// Next posterior point at least `min_sep` (scaled) away from `taken`.
    fn draw(&mut self, taken: &[ParameterVector], spans: &[f64], min_sep: f64) -> Option<ParameterVector> {
        while self.next < self.order.len() {
            let p = &self.pool[self.order[self.next]];
            self.next += 1;
            let far = taken.iter().all(|q| {
                p.iter()
                    .zip(q)
                    .zip(spans)
                    .map(|((a, b), s)| ((a - b) / s).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    >= min_sep
            });
            if far {
                return Some(p.clone());
            }
        }
        None
    }
}

/// Steps 2 to 4: add a stretched posterior batch, re-condition, resample.
pub fn refine_iteration(
    state: &mut RefinementState,
    problem: &CalibrationProblem,
    simulator: &dyn Simulator,
) -> Result<()> {
    let settings = state.settings;
    let iteration = state.posteriors.len();
    let batch = settings.schedule.batch();
    let previous = state.latest().clone();
    if previous.len() < batch {
        return Err(Error::invalid(format!(
            "posterior sample of {} points is smaller than the batch of {batch}",
            previous.len()
        )));
    }
    let spans = state.design.space().spans();
    let design_box = state.design.design_box();
    let mut rng = rng::indexed_stream(settings.seed, rng::REFINEMENT, iteration as u64);
    let mut candidates = Candidates::new(previous.parameters(), &mut rng);

    let mut taken: Vec<ParameterVector> = state.design.points().to_vec();
    let mut raw = Vec::with_capacity(batch);
    for _ in 0..batch {
        let p = candidates
            .draw(&taken, &spans, settings.min_separation)
            .ok_or_else(|| Error::invalid("posterior sample has too few distinct points for the batch"))?;
        taken.push(p.clone());
        raw.push(p);
    }
    let center = sample_mean(&raw);
    let stretch = |p: &ParameterVector| -> ParameterVector {
        let mut q: Vec<f64> = p
            .iter()
            .zip(&center)
            .map(|(x, c)| c + settings.stretch * (x - c))
            .collect();
        design_box.clip(&mut q);
        q
    };
    let mut points: Vec<ParameterVector> = raw.iter().map(stretch).collect();

    let t = Instant::now();
    let mut results = simulate_batch(simulator, &points);
    state.simulator_calls += points.len();
    for k in 0..points.len() {
        let mut attempts = 1;
        while let Err(error) = &results[k] {
            state.failures.push(RecordedFailure {
                iteration,
                point: points[k].clone(),
                error: error.clone(),
            });
            if attempts >= settings.max_attempts {
                return Err(Error::Simulator(error.clone()));
            }
            log::warn!("simulator failed at {:?}: {error}; drawing a replacement", points[k]);
            let p = candidates
                .draw(&taken, &spans, settings.min_separation)
                .ok_or_else(|| Error::Simulator(error.clone()))?;
            taken.push(p.clone());
            points[k] = stretch(&p);
            results[k] = simulator.simulate(&points[k]);
            state.simulator_calls += 1;
            attempts += 1;
        }
    }
    let simulate_ms = millis(t);
    for (p, r) in points.into_iter().zip(results) {
        state
            .design
            .push(p, Origin::Refinement(iteration), r.expect("failures handled"))?;
    }

    let t = Instant::now();
    let emulator = Emulator::build(&state.design, &state.model, state.aux)?;
    let condition_ms = millis(t);
    let t = Instant::now();
    let posterior = infer(
        problem,
        emulator_model(&emulator),
        &settings.sampler,
        rng::indexed_stream(settings.seed, rng::MCMC, iteration as u64),
        Some(&previous.final_walkers),
    )?;
    let mcmc_ms = millis(t);

    let mut crng = rng::indexed_stream(settings.seed, CROSS_MATCH_STREAM, iteration as u64);
    let d_prev = compare_samples(&posterior.points, &previous.points, settings.subsample, &mut crng)?.distance;
    let d_ref = state
        .reference
        .as_ref()
        .map(|r| compare_samples(&posterior.points, r, settings.subsample, &mut crng).map(|c| c.distance))
        .transpose()?;
    log::info!(
        "iteration {iteration}: design size {}, d_cm to previous {d_prev:.3}",
        state.design.len()
    );
    state.diagnostics.push(IterationDiagnostics {
        iteration,
        design_size: state.design.len(),
        d_cm_previous: Some(d_prev),
        d_cm_reference: d_ref,
        acceptance_rate: posterior.acceptance_rate,
        simulate_ms,
        condition_ms,
        mcmc_ms,
    });
    state.posteriors.push(posterior);
    Ok(())
}

/// The full loop: initial stage and four refinement iterations.
pub fn run_refinement(
    problem: &CalibrationProblem,
    simulator: &dyn Simulator,
    model: &LinearPriorModel,
    settings: RefinementSettings,
    reference: Option<&[Vec<f64>]>,
) -> Result<RefinementState> {
    let mut state = initial_stage(problem, simulator, model, settings, reference)?;
    for _ in 0..Schedule::BATCHES {
        refine_iteration(&mut state, problem, simulator)?;
    }
    if !state.converged() {
        log::warn!(
            "refinement did not reach the convergence criterion: {:?}",
            state.distances()
        );
    }
    Ok(state)
}

/// Seeded uniform draw inside a box, used by tests and examples.
pub fn uniform_in(space: &crate::design::ParameterSpace, rng: &mut Rng) -> ParameterVector {
    space
        .dims()
        .iter()
        .map(|d| d.lower + d.span() * rng.random::<f64>())
        .collect()
}

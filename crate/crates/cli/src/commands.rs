use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mechemu_core::emulator::kalman;
use mechemu_core::inference::{CalibrationProblem, PosteriorSample};
use mechemu_core::likelihood::{box_cox, box_cox_inverse, LikelihoodContext};
use mechemu_core::refinement::{
    compare_samples, direct_posterior, emulator_posterior, estimate_auxiliary, run_refinement, simulate_batch,
    CrossMatch, IterationDiagnostics,
};
use mechemu_core::rng::{self, Rng};
use mechemu_core::simulators::observation::draw_bias;
use mechemu_core::{AuxiliaryParameters, DesignSet, Emulator};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::config::{Setup, SimulatorConfig};
use crate::{write_file, CliError, RunLock};

/// Which model sits inside the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Emulator,
    Direct,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Emulator => "emulator",
            Mode::Direct => "direct",
        }
    }
}

pub const BAND_FILE: &str = "band.csv";
pub const POSTERIOR_FILE: &str = "posterior.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const UNITS_FILE: &str = "units.txt";
pub const BENCH_HEADER: &str = "design_size,conditioning_ms,emulation_ms,fast_emulation_ms,log_likelihood_ms";
const BAND_DRAWS: usize = 200;

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Halton design of `size` points (default `n/2`) with simulator outputs and
/// auxiliary parameters.
pub fn cmd_design(setup: &Setup, size: Option<usize>) -> Result<PathBuf, CliError> {
    let _lock = RunLock::acquire(&setup.out_dir)?;
    let count = size.unwrap_or(setup.config.budget / 2);
    let emu = &setup.config.emulator;
    let mut design = DesignSet::halton(setup.space.clone(), emu.overreach, count, emu.halton_skip)?;
    let outputs = simulate_batch(setup.simulator.as_ref(), design.points())
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    design.set_outputs(outputs)?;
    let settings = setup.refinement_settings()?;
    let aux = estimate_auxiliary(&design, &setup.model, emu.gamma, &settings.aux)?;
    let dir = setup.design_dir();
    design.save(&dir, Some(&aux))?;
    println!("design: {} points written to {}", design.len(), dir.display());
    println!(
        "auxiliary: k = {:.6e}, t0 = {:.1} s, A = {:.4e} m2, sigma = {:.4e}",
        aux.k, aux.t0, aux.area, aux.sigma
    );
    Ok(dir)
}

fn load_design(setup: &Setup) -> Result<(DesignSet, AuxiliaryParameters), CliError> {
    let dir = setup.design_dir();
    if !dir.join("design.csv").exists() {
        return Err(CliError::Config(format!(
            "no design in {}; run `mechemu design` first",
            dir.display()
        )));
    }
    let (design, aux) = DesignSet::load(&dir, setup.space.clone(), setup.config.emulator.overreach)?;
    if !design.has_outputs() {
        return Err(CliError::Config(format!("design in {} has no outputs", dir.display())));
    }
    let aux = match aux {
        Some(aux) => aux,
        None => estimate_auxiliary(
            &design,
            &setup.model,
            setup.config.emulator.gamma,
            &setup.refinement_settings()?.aux,
        )?,
    };
    Ok((design, aux))
}

/// Posterior under the emulator mean or the simulator itself.
pub fn cmd_infer(setup: &Setup, mode: Mode) -> Result<PathBuf, CliError> {
    let _lock = RunLock::acquire(&setup.out_dir)?;
    let problem = setup.problem()?;
    let sampler = setup.config.sampler;
    let mcmc = rng::stream(setup.seed, rng::MCMC);
    let started = Instant::now();
    let (posterior, band) = match mode {
        Mode::Emulator => {
            let (design, aux) = load_design(setup)?;
            let posterior = emulator_posterior(&problem, &design, &setup.model, aux, &sampler, mcmc, None)?;
            let emulator = Emulator::build(&design, &setup.model, aux)?;
            let band = predictive_band(&problem, &posterior, setup.seed, |theta| {
                let mut out = Vec::new();
                emulator.predict_mean_into(theta, &mut out)?;
                Ok(out)
            })?;
            (posterior, band)
        }
        Mode::Direct => {
            let dim = problem.space.len() + 2;
            let walkers = sampler
                .walkers
                .unwrap_or_else(|| mechemu_core::sampler::default_walkers(dim));
            let evaluations = walkers * (sampler.steps + 1);
            if matches!(setup.config.simulator, SimulatorConfig::External(_)) {
                log::warn!("direct inference will run the external simulator {evaluations} times");
            }
            if sampler.steps < 1000 {
                log::warn!(
                    "only {} sampler steps ({evaluations} simulator evaluations); the chain is unlikely to have converged",
                    sampler.steps
                );
            }
            let posterior = direct_posterior(&problem, setup.simulator.as_ref(), &sampler, mcmc)?;
            let band = predictive_band(&problem, &posterior, setup.seed, |theta| {
                Ok(setup.simulator.simulate(theta)?.into_values())
            })?;
            (posterior, band)
        }
    };
    let name = mode.name();
    write_file(&setup.out_dir.join(UNITS_FILE), &setup.config.flow_units)?;
    let path = setup.out_dir.join(format!("posterior_{name}.csv"));
    posterior.write_csv(&path)?;
    write_file(&setup.out_dir.join(format!("band_{name}.csv")), band)?;
    let summary = json!({
        "mode": name,
        "samples": posterior.len(),
        "acceptance_rate": posterior.acceptance_rate,
        "thin": posterior.thin,
        "evaluations": posterior.evaluations,
        "tau_s": problem.prior.tau,
        "wall_clock_s": started.elapsed().as_secs_f64(),
    });
    write_file(&setup.out_dir.join(format!("infer_{name}.json")), to_json(&summary))?;
    println!(
        "{name} posterior: {} samples, acceptance {:.3}, written to {}",
        posterior.len(),
        posterior.acceptance_rate,
        path.display()
    );
    Ok(path)
}

#[derive(Debug, Serialize)]
struct RefineSummary {
    converged: bool,
    threshold: f64,
    schedule: Vec<usize>,
    d_cm_previous: Vec<f64>,
    d_cm_reference: Vec<Option<f64>>,
    simulator_calls: usize,
    failures: usize,
    tau_s: f64,
    auxiliary: AuxiliaryParameters,
}

fn diagnostics_csv(rows: &[IterationDiagnostics]) -> String {
    // timings go to a separate JSON file so this CSV is reproducible
    let mut out = String::from("iteration,design_size,d_cm_previous,d_cm_reference,acceptance_rate\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for d in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            d.iteration,
            d.design_size,
            opt(d.d_cm_previous),
            opt(d.d_cm_reference),
            d.acceptance_rate
        )
        .expect("write to string");
    }
    out
}

/// The full refinement loop.
pub fn cmd_refine(setup: &Setup) -> Result<PathBuf, CliError> {
    let _lock = RunLock::acquire(&setup.out_dir)?;
    let problem = setup.problem()?;
    let settings = setup.refinement_settings()?;
    let reference = match &setup.config.reference_posterior {
        Some(p) => Some(read_sample(&setup.path(p))?),
        None => None,
    };
    let sizes = settings.schedule.sizes();
    println!(
        "schedule: {}",
        sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    );
    let state = run_refinement(
        &problem,
        setup.simulator.as_ref(),
        &setup.model,
        settings,
        reference.as_deref(),
    )?;

    let out = &setup.out_dir;
    state.design.save(setup.design_dir(), Some(&state.aux))?;
    for (k, p) in state.posteriors.iter().enumerate() {
        p.write_csv(out.join(format!("posterior_iter{k}.csv")))?;
    }
    let final_path = out.join(POSTERIOR_FILE);
    state.latest().write_csv(&final_path)?;
    write_file(&out.join(DIAGNOSTICS_FILE), diagnostics_csv(&state.diagnostics))?;
    let timings: Vec<_> = state
        .diagnostics
        .iter()
        .map(|d| json!({"iteration": d.iteration, "simulate_ms": d.simulate_ms, "condition_ms": d.condition_ms, "mcmc_ms": d.mcmc_ms}))
        .collect();
    write_file(&out.join("timings.json"), to_json(&timings))?;

    let emulator = Emulator::build(&state.design, &setup.model, state.aux)?;
    let band = predictive_band(&problem, state.latest(), setup.seed, |theta| {
        let mut v = Vec::new();
        emulator.predict_mean_into(theta, &mut v)?;
        Ok(v)
    })?;
    write_file(&out.join(BAND_FILE), band)?;
    write_file(&out.join(UNITS_FILE), &setup.config.flow_units)?;

    let summary = RefineSummary {
        converged: state.converged(),
        threshold: settings.threshold,
        schedule: sizes,
        d_cm_previous: state.distances(),
        d_cm_reference: state.diagnostics.iter().map(|d| d.d_cm_reference).collect(),
        simulator_calls: state.simulator_calls,
        failures: state.failures.len(),
        tau_s: problem.prior.tau,
        auxiliary: state.aux,
    };
    write_file(&out.join(SUMMARY_FILE), to_json(&summary))?;
    for d in &state.diagnostics {
        println!(
            "iteration {}: design size {}, d_cm to previous {}",
            d.iteration,
            d.design_size,
            d.d_cm_previous.map_or("-".into(), |x| format!("{x:.3}"))
        );
    }
    println!("converged: {}", summary.converged);
    Ok(final_path)
}

/// Numeric sample CSV with a header; a trailing `log_posterior` column is dropped.
pub fn read_sample_with_names(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read sample {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?;
    let mut names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let drop_last = names.last().map(String::as_str) == Some("log_posterior");
    if drop_last {
        names.pop();
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut values = line
            .split(',')
            .map(|f| match f.trim() {
                "" => Ok(f64::NAN),
                t => t.parse::<f64>(),
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if drop_last {
            values.pop();
        }
        if values.len() != names.len() {
            return Err(CliError::Config(format!(
                "{} row {}: wrong field count",
                path.display(),
                i + 1
            )));
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} has no rows", path.display())));
    }
    Ok((names, rows))
}

pub fn read_sample(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    Ok(read_sample_with_names(path)?.1)
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub d_cm: f64,
    pub cross_pairs: usize,
    pub sample_size: usize,
    pub exact: bool,
    pub seed: u64,
}

/// Cross-match distance between two sample files.
///
/// A file compared with itself is split into two random disjoint halves.
pub fn cmd_compare(a: &Path, b: &Path, seed: u64, size: usize) -> Result<Comparison, CliError> {
    let (names_a, rows_a) = read_sample_with_names(a)?;
    let (names_b, rows_b) = read_sample_with_names(b)?;
    if names_a != names_b {
        return Err(CliError::Config(format!(
            "column mismatch: {} vs {}",
            names_a.join(","),
            names_b.join(",")
        )));
    }
    let mut rng = rng::stream(seed, "compare");
    let same =
        std::fs::canonicalize(a).ok().is_some() && std::fs::canonicalize(a).ok() == std::fs::canonicalize(b).ok();
    let (x, y) = if same {
        let mut rows = rows_a;
        rows.shuffle(&mut rng);
        let half = rows.len() / 2;
        let second = rows.split_off(half);
        (rows, second[..half].to_vec())
    } else {
        (rows_a, rows_b)
    };
    if x.len() != y.len() {
        log::info!(
            "samples have {} and {} rows; subsampling the larger with seed {seed}",
            x.len(),
            y.len()
        );
    }
    let CrossMatch {
        distance,
        cross_pairs,
        kind,
    } = compare_samples(&x, &y, size, &mut rng)?;
    let m = size.min(x.len()).min(y.len());
    let result = Comparison {
        d_cm: distance,
        cross_pairs,
        sample_size: m,
        exact: kind == mechemu_core::matching::MatchingKind::Exact,
        seed,
    };
    println!("{}", serde_json::to_string(&result).expect("serializable"));
    Ok(result)
}

/// Quantile band of the posterior predictive `g^-1(g(y) + B + E)`.
fn predictive_band<F>(
    problem: &CalibrationProblem,
    posterior: &PosteriorSample,
    seed: u64,
    model: F,
) -> Result<String, CliError>
where
    F: Fn(&[f64]) -> mechemu_core::Result<Vec<f64>>,
{
    let observed = problem.context.observed();
    let lambda = problem.context.lambda();
    let d = problem.space.len();
    let n = posterior.len();
    let draws = BAND_DRAWS.min(n);
    let mut rng: Rng = rng::stream(seed, "band");
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); observed.len()];
    for k in 0..draws {
        let row = &posterior.points[k * n / draws];
        let flow = model(&row[..d])?;
        let bias = draw_bias(flow.len(), observed.step(), row[d + 1], problem.prior.tau, &mut rng);
        for (i, (&y, b)) in flow.iter().zip(bias).enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = box_cox(y.max(0.0), lambda)? + b + row[d] * e;
            columns[i].push(box_cox_inverse(z, lambda).unwrap_or(0.0));
        }
    }
    let mut out = String::from("time_s,lower,median,upper,observed\n");
    for (i, col) in columns.iter_mut().enumerate() {
        col.sort_by(f64::total_cmp);
        let q = |p: f64| col[((col.len() - 1) as f64 * p).round() as usize];
        writeln!(
            out,
            "{},{},{},{},{}",
            observed.time(i),
            q(0.025),
            q(0.5),
            q(0.975),
            observed.values()[i]
        )
        .expect("write to string");
    }
    Ok(out)
}

/// Timing table for design sizes 32, 64 and 128.
pub fn cmd_bench(setup: &Setup, sizes: &[usize], queries: usize) -> Result<String, CliError> {
    let _lock = RunLock::acquire(&setup.out_dir)?;
    let observed = match setup.config.observations {
        Some(_) => setup.observations()?,
        None => setup.simulator.simulate(&setup.space.centers())?,
    };
    let context = LikelihoodContext::new(observed, setup.config.error_model.lambda)?;
    let settings = setup.refinement_settings()?;
    let emu_cfg = &setup.config.emulator;
    let mut rng = rng::stream(setup.seed, "bench");
    let queries_at: Vec<Vec<f64>> = (0..queries.max(1))
        .map(|_| mechemu_core::refinement::uniform_in(&setup.space, &mut rng))
        .collect();
    let mut table = String::from(BENCH_HEADER);
    table.push('\n');
    for &n in sizes {
        let mut design = DesignSet::halton(setup.space.clone(), emu_cfg.overreach, n, emu_cfg.halton_skip)?;
        let outputs = simulate_batch(setup.simulator.as_ref(), design.points())
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        design.set_outputs(outputs)?;
        let aux = estimate_auxiliary(&design, &setup.model, emu_cfg.gamma, &settings.aux)?;

        let t = Instant::now();
        let emulator = Emulator::build(&design, &setup.model, aux)?;
        let conditioning_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        for q in &queries_at {
            kalman::condition(&design, &setup.model, &aux, q)?;
        }
        let emulation_ms = t.elapsed().as_secs_f64() * 1e3 / queries_at.len() as f64;

        let reps = 200;
        let t = Instant::now();
        let mut flow = Vec::new();
        for k in 0..reps {
            emulator.predict(&queries_at[k % queries_at.len()])?;
        }
        let fast_emulation_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;

        emulator.predict_mean_into(&queries_at[0], &mut flow)?;
        let t = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += context.log_likelihood(&flow, 0.05, 0.1, 3600.0);
        }
        let log_likelihood_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;
        log::debug!("checksum {sink}");
        writeln!(
            table,
            "{n},{conditioning_ms:.4},{emulation_ms:.4},{fast_emulation_ms:.4},{log_likelihood_ms:.4}"
        )
        .expect("write to string");
    }
    let path = setup.out_dir.join("bench.csv");
    write_file(&path, &table)?;
    print!("{table}");
    Ok(table)
}

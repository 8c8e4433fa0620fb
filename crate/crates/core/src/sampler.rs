//! Affine-invariant ensemble MCMC with stretch moves.
//!
//! The ensemble is split into two halves that are updated in turn, each walker
//! moving relative to a partner from the other half. All random numbers for a
//! half are drawn sequentially before the proposals are evaluated, so the chain
//! is identical whether evaluations run in parallel or not.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SCALE: f64 = 2.0;
pub const DEFAULT_STEPS: usize = 4000;
pub const DEFAULT_BURN_IN_FRACTION: f64 = 0.25;

pub fn default_walkers(dim: usize) -> usize {
    (2 * dim).max(16)
}

/// Stretch factor from a uniform draw: density proportional to `1/sqrt(z)` on `[1/a, a]`.
pub fn draw_z(a: f64, u: f64) -> f64 {
    let s = a.sqrt();
    let v = (s - 1.0 / s) * u + 1.0 / s;
    v * v
}

/// Proposal `partner + z (walker - partner)` and its log acceptance adjustment.
pub fn stretch_move(walker: &[f64], partner: &[f64], z: f64) -> (Vec<f64>, f64) {
    let proposal = walker.iter().zip(partner).map(|(&w, &p)| p + z * (w - p)).collect();
    (proposal, (walker.len() as f64 - 1.0) * z.ln())
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    walkers: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
    rng: Rng,
    step: usize,
}

impl EnsembleState {
    /// Evaluate `log_post` at the initial walkers.
    pub fn new<F>(walkers: Vec<Vec<f64>>, log_post: &F, rng: Rng) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let dim = walkers.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("ensemble needs walkers of positive dimension"));
        }
        if walkers.iter().any(|w| w.len() != dim) {
            return Err(Error::invalid("walkers differ in dimension"));
        }
        if walkers.len() < 2 * dim {
            return Err(Error::invalid(format!(
                "ensemble of {} walkers is too small for dimension {dim} (need at least {})",
                walkers.len(),
                2 * dim
            )));
        }
        let log_probs: Vec<f64> = walkers.par_iter().map(|w| log_post(w)).collect();
        let feasible = log_probs.iter().filter(|l| l.is_finite()).count();
        if feasible == 0 {
            return Err(Error::invalid("no initial walker has a finite log-posterior"));
        }
        if feasible < walkers.len() {
            log::warn!(
                "{} of {} initial walkers are infeasible",
                walkers.len() - feasible,
                walkers.len()
            );
        }
        Ok(Self {
            walkers,
            log_probs,
            rng,
            step: 0,
        })
    }

    pub fn walkers(&self) -> &[Vec<f64>] {
        &self.walkers
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn dim(&self) -> usize {
        self.walkers[0].len()
    }

    pub fn len(&self) -> usize {
        self.walkers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walkers.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// Stored walker states, step-major.
#[derive(Debug, Clone)]
pub struct Chain {
    dim: usize,
    walkers: usize,
    positions: Vec<f64>,
    log_probs: Vec<f64>,
    accepted: usize,
    proposed: usize,
}

impl Chain {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn walkers(&self) -> usize {
        self.walkers
    }

    pub fn steps(&self) -> usize {
        self.log_probs.len() / self.walkers
    }

    pub fn position(&self, step: usize, walker: usize) -> &[f64] {
        let start = (step * self.walkers + walker) * self.dim;
        &self.positions[start..start + self.dim]
    }

    pub fn log_prob(&self, step: usize, walker: usize) -> f64 {
        self.log_probs[step * self.walkers + walker]
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Trace of one coordinate for one walker from `burn_in` on.
    pub fn trace(&self, walker: usize, coord: usize, burn_in: usize) -> Vec<f64> {
        (burn_in..self.steps())
            .map(|s| self.position(s, walker)[coord])
            .collect()
    }
}

struct Draw {
    partner: usize,
    z: f64,
    accept_u: f64,
}

/// Advance the ensemble `steps` times with stretch scale `a`.
pub fn run_ensemble<F>(log_post: &F, state: &mut EnsembleState, steps: usize, a: f64) -> Result<Chain>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    run_ensemble_with(log_post, state, steps, a, true)
}

/// As [`run_ensemble`], optionally evaluating proposals on the current thread only.
pub fn run_ensemble_with<F>(
    log_post: &F,
    state: &mut EnsembleState,
    steps: usize,
    a: f64,
    parallel: bool,
) -> Result<Chain>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(a > 1.0) {
        return Err(Error::invalid(format!("stretch scale must exceed 1, got {a}")));
    }
    let w = state.len();
    let dim = state.dim();
    let half = w / 2;
    let mut chain = Chain {
        dim,
        walkers: w,
        positions: Vec::with_capacity(steps * w * dim),
        log_probs: Vec::with_capacity(steps * w),
        accepted: 0,
        proposed: 0,
    };
    for _ in 0..steps {
        for (lo, hi) in [(0, half), (half, w)] {
            let others = w - (hi - lo);
            let draws: Vec<Draw> = (lo..hi)
                .map(|_| {
                    let k = state.rng.random_range(0..others);
                    Draw {
                        partner: if lo == 0 { hi + k } else { k },
                        z: draw_z(a, state.rng.random::<f64>()),
                        accept_u: state.rng.random::<f64>(),
                    }
                })
                .collect();
            let proposals: Vec<(Vec<f64>, f64)> = draws
                .iter()
                .enumerate()
                .map(|(k, d)| stretch_move(&state.walkers[lo + k], &state.walkers[d.partner], d.z))
                .collect();
            let evaluate = |p: &(Vec<f64>, f64)| log_post(&p.0);
            let values: Vec<f64> = if parallel {
                proposals.par_iter().map(evaluate).collect()
            } else {
                proposals.iter().map(evaluate).collect()
            };
            for (k, ((proposal, adjust), value)) in proposals.into_iter().zip(values).enumerate() {
                let i = lo + k;
                chain.proposed += 1;
                let log_ratio = adjust + value - state.log_probs[i];
                if value.is_finite() && (log_ratio >= 0.0 || draws[k].accept_u.ln() < log_ratio) {
                    state.walkers[i] = proposal;
                    state.log_probs[i] = value;
                    chain.accepted += 1;
                }
            }
        }
        state.step += 1;
        for (wk, lp) in state.walkers.iter().zip(&state.log_probs) {
            chain.positions.extend_from_slice(wk);
            chain.log_probs.push(*lp);
        }
    }
    Ok(chain)
}

/// Retained states after burn-in and thinning, step-major then walker order.
pub fn flat_sample(chain: &Chain, burn_in: usize, thin: usize) -> Result<Vec<Vec<f64>>> {
    Ok(flat_sample_with_log_probs(chain, burn_in, thin)?.0)
}

pub fn flat_sample_with_log_probs(chain: &Chain, burn_in: usize, thin: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if thin == 0 {
        return Err(Error::invalid("thinning interval must be at least 1"));
    }
    if burn_in >= chain.steps() {
        return Err(Error::invalid(format!(
            "burn-in {burn_in} leaves no states of {}",
            chain.steps()
        )));
    }
    let kept = (chain.steps() - burn_in) / thin;
    if kept == 0 {
        return Err(Error::invalid("thinning leaves no states"));
    }
    let mut points = Vec::with_capacity(kept * chain.walkers);
    let mut lps = Vec::with_capacity(kept * chain.walkers);
    // the last state of each thinning block is kept
    for b in 0..kept {
        let s = burn_in + (b + 1) * thin - 1;
        for wk in 0..chain.walkers {
            points.push(chain.position(s, wk).to_vec());
            lps.push(chain.log_prob(s, wk));
        }
    }
    Ok((points, lps))
}

/// Integrated autocorrelation time of one coordinate, averaging the
/// autocorrelation function over walkers and using an adaptive window.
pub fn integrated_autocorr_time(chain: &Chain, coord: usize, burn_in: usize) -> f64 {
    let n = chain.steps().saturating_sub(burn_in);
    if n < 4 {
        return 1.0;
    }
    let traces: Vec<Vec<f64>> = (0..chain.walkers())
        .map(|w| {
            let t = chain.trace(w, coord, burn_in);
            let mean = t.iter().sum::<f64>() / n as f64;
            t.into_iter().map(|x| x - mean).collect()
        })
        .collect();
    let acov = |lag: usize| -> f64 {
        traces
            .iter()
            .map(|t| t[..n - lag].iter().zip(&t[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
            .sum::<f64>()
            / traces.len() as f64
    };
    let c0 = acov(0);
    if !(c0 > 0.0) {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        tau += 2.0 * acov(lag) / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Per-coordinate integrated autocorrelation times.
pub fn autocorr_times(chain: &Chain, burn_in: usize) -> Vec<f64> {
    (0..chain.dim())
        .map(|c| integrated_autocorr_time(chain, c, burn_in))
        .collect()
}

/// Thinning interval: the largest autocorrelation time rounded up.
pub fn thinning_interval(chain: &Chain, burn_in: usize) -> usize {
    autocorr_times(chain, burn_in).into_iter().fold(1.0f64, f64::max).ceil() as usize
}

/// Effective sample size of one coordinate across the ensemble.
pub fn effective_sample_size(chain: &Chain, coord: usize, burn_in: usize) -> f64 {
    let n = (chain.steps() - burn_in) * chain.walkers();
    n as f64 / integrated_autocorr_time(chain, coord, burn_in)
}

/// Initial walkers scattered around `center`, redrawn until the log-posterior is finite.
pub fn init_ball<F>(
    center: &[f64],
    scales: &[f64],
    walkers: usize,
    rng: &mut Rng,
    log_post: &F,
    max_tries: usize,
) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..walkers)
        .map(|_| {
            let mut best = center.to_vec();
            for _ in 0..max_tries {
                let p: Vec<f64> = center
                    .iter()
                    .zip(scales)
                    .map(|(&c, &s)| c + s * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                if log_post(&p).is_finite() {
                    return p;
                }
                best = p;
            }
            best
        })
        .collect()
}

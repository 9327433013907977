//! Reverse-process generation: tau-leaping, Euler, exact simulation through
//! the model, and self-correction.

mod correct;

pub use correct::{recover_clean, self_correct, temper, RecoveredClean, SelfCorrectConfig, SelfCorrectOutcome};

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{Schedule, ScheduleKind};
use crate::error::{domain, Error, Result};
use crate::model::TwoHead;
use crate::quad;
use crate::rng::{categorical, exp1, exponential, stream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TauLeaping,
    Euler,
    Exact,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" | "tau_leaping" => Ok(Self::TauLeaping),
            "euler" => Ok(Self::Euler),
            "exact" => Ok(Self::Exact),
            other => Err(Error::Parse(format!("unknown sampling scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub scheme: Scheme,
    pub seed: u64,
    /// Model times are clamped to `[clamp_eps, T - clamp_eps]`.
    pub clamp_eps: f64,
}

impl SamplerConfig {
    pub fn new(schedule: &Schedule, scheme: Scheme, steps: usize, seed: u64) -> Self {
        Self { steps, scheme, seed, clamp_eps: schedule.eps() }
    }

    fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.steps == 0 {
            return Err(domain("sampler needs at least one step"));
        }
        if !(self.clamp_eps > 0.0 && 2.0 * self.clamp_eps < schedule.horizon()) {
            return Err(domain("clamp_eps must lie in (0, T / 2)"));
        }
        Ok(())
    }
}

/// Counters accumulated while sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleStats {
    pub model_evals: u64,
    pub jumps: u64,
    /// Euler steps whose off-diagonal mass exceeded one and was rescaled.
    pub overflow_steps: u64,
}

impl SampleStats {
    fn merge(mut self, o: Self) -> Self {
        self.model_evals += o.model_evals;
        self.jumps += o.jumps;
        self.overflow_steps += o.overflow_steps;
        self
    }
}

/// `x_T`: each position drawn from `pi` (uniform noise, or all-mask).
pub fn initial_noise<R: Rng + ?Sized>(schedule: &Schedule, seq_len: usize, rng: &mut R) -> Vec<usize> {
    match schedule.kind() {
        ScheduleKind::Masked => vec![schedule.num_states() - 1; seq_len],
        ScheduleKind::Uniform => (0..seq_len).map(|_| rng.random_range(0..schedule.num_states())).collect(),
    }
}

fn check_model<M: TwoHead + ?Sized>(model: &M, schedule: &Schedule) -> Result<()> {
    if model.num_states() != schedule.num_states() {
        return Err(domain("model and schedule disagree on the number of states"));
    }
    Ok(())
}

fn step_time(schedule: &Schedule, config: &SamplerConfig, n: usize) -> f64 {
    let tau = schedule.horizon() / config.steps as f64;
    (n as f64 * tau).clamp(config.clamp_eps, schedule.horizon() - config.clamp_eps)
}

/// Parallel per-position leaps: position `l` jumps via `r` iff
/// `Exp(lambda_l) < tau`. One model evaluation per step.
pub fn sample_tau_leaping<M: TwoHead + ?Sized>(
    model: &M,
    schedule: &Schedule,
    config: &SamplerConfig,
    rng: &mut SimRng,
) -> Result<(Vec<usize>, SampleStats)> {
    config.validate(schedule)?;
    check_model(model, schedule)?;
    let tau = schedule.horizon() / config.steps as f64;
    let mut x = initial_noise(schedule, model.seq_len(), rng);
    let mut stats = SampleStats::default();
    for n in (1..=config.steps).rev() {
        let t = step_time(schedule, config, n);
        let heads = model.forward(&x, t)?;
        stats.model_evals += 1;
        for (xl, head) in x.iter_mut().zip(&heads.per_position) {
            if exponential(rng, head.exit_rate) < tau {
                if let Some(j) = categorical(rng, &head.jump_dist) {
                    *xl = j;
                    stats.jumps += 1;
                }
            }
        }
    }
    Ok((x, stats))
}

/// One-step categorical transition `p_j = lambda r_j tau`, stay otherwise.
/// Off-diagonal mass above one is rescaled to one and counted.
pub fn sample_euler<M: TwoHead + ?Sized>(
    model: &M,
    schedule: &Schedule,
    config: &SamplerConfig,
    rng: &mut SimRng,
) -> Result<(Vec<usize>, SampleStats)> {
    config.validate(schedule)?;
    check_model(model, schedule)?;
    let tau = schedule.horizon() / config.steps as f64;
    let mut x = initial_noise(schedule, model.seq_len(), rng);
    let mut stats = SampleStats::default();
    for n in (1..=config.steps).rev() {
        let t = step_time(schedule, config, n);
        let heads = model.forward(&x, t)?;
        stats.model_evals += 1;
        for (xl, head) in x.iter_mut().zip(&heads.per_position) {
            let row = euler_row(*xl, head.exit_rate, &head.jump_dist, tau, &mut stats.overflow_steps);
            let j = categorical(rng, &row).expect("Euler rows are probability vectors");
            if j != *xl {
                *xl = j;
                stats.jumps += 1;
            }
        }
    }
    Ok((x, stats))
}

/// The Euler transition row out of `i`.
pub fn euler_row(i: usize, exit_rate: f64, jump_dist: &[f64], tau: f64, overflow: &mut u64) -> Vec<f64> {
    let mut row: Vec<f64> = jump_dist.iter().map(|r| exit_rate * r * tau).collect();
    row[i] = 0.0;
    let off: f64 = row.iter().sum();
    if off > 1.0 {
        *overflow += 1;
        row.iter_mut().for_each(|p| *p /= off);
        row[i] = 0.0;
    } else {
        row[i] = 1.0 - off;
    }
    row
}

/// Statistically exact reverse simulation through the model on
/// `[clamp_eps, T - clamp_eps]`. With `L` positions the total exit rate is
/// the sum over positions and the jumping position is drawn in proportion
/// to its exit rate.
pub fn sample_exact<M: TwoHead + ?Sized>(
    model: &M,
    schedule: &Schedule,
    config: &SamplerConfig,
    rng: &mut SimRng,
) -> Result<(Vec<usize>, SampleStats)> {
    config.validate(schedule)?;
    check_model(model, schedule)?;
    let (t_lo, t_hi) = (config.clamp_eps, schedule.horizon() - config.clamp_eps);
    let mut x = initial_noise(schedule, model.seq_len(), rng);
    let mut stats = SampleStats::default();
    let mut breaks: Vec<f64> = model.time_breakpoints();
    breaks.sort_by(f64::total_cmp);
    let evals = std::cell::Cell::new(0u64);

    let total_rate = |x: &[usize], t: f64| -> Result<f64> {
        evals.set(evals.get() + 1);
        Ok(model.forward(x, t)?.per_position.iter().map(|h| h.exit_rate).sum())
    };
    let hazard = |x: &[usize], a: f64, b: f64| -> Result<f64> {
        let mut h = 0.0;
        let mut lo = a;
        for &c in breaks.iter().filter(|&&c| c > a && c < b) {
            h += quad::adaptive(|t| total_rate(x, t), lo, c, crate::path::SURVIVAL_REL_TOL)?;
            lo = c;
        }
        h += quad::adaptive(|t| total_rate(x, t), lo, b, crate::path::SURVIVAL_REL_TOL)?;
        Ok(h)
    };
    let sim = |e: Error| match e {
        Error::NonFinite(m) => Error::Simulation(format!("non-finite model rate: {m}")),
        other => other,
    };

    let mut t = t_hi;
    loop {
        let e = exp1(rng);
        if hazard(&x, t_lo, t).map_err(sim)? <= e {
            break;
        }
        // Find t' < t with int_{t'}^{t} Lambda = e.
        let (mut lo, mut hi, mut acc) = (t_lo, t, 0.0);
        while hi - lo > crate::path::JUMP_TIME_TOL {
            let mid = 0.5 * (lo + hi);
            let h = hazard(&x, mid, hi).map_err(sim)?;
            if acc + h < e {
                acc += h;
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut choice = None;
        for t_eval in [lo, hi] {
            let heads = model.forward(&x, t_eval)?;
            evals.set(evals.get() + 1);
            let rates: Vec<f64> = heads.per_position.iter().map(|h| h.exit_rate).collect();
            if let Some(l) = categorical(rng, &rates) {
                if let Some(j) = categorical(rng, &heads.per_position[l].jump_dist) {
                    choice = Some((l, j));
                    break;
                }
            }
        }
        let (l, j) = choice.ok_or_else(|| Error::Simulation(format!("no jump destination near t = {lo}")))?;
        x[l] = j;
        stats.jumps += 1;
        t = lo;
        if t <= t_lo {
            break;
        }
    }
    stats.model_evals = evals.get();
    Ok((x, stats))
}

/// Sample `index` of a run: stream `index` of `config.seed`.
pub fn sample_one<M: TwoHead + ?Sized>(
    model: &M,
    schedule: &Schedule,
    config: &SamplerConfig,
    index: u64,
) -> Result<(Vec<usize>, SampleStats)> {
    let mut rng = stream(config.seed, index);
    match config.scheme {
        Scheme::TauLeaping => sample_tau_leaping(model, schedule, config, &mut rng),
        Scheme::Euler => sample_euler(model, schedule, config, &mut rng),
        Scheme::Exact => sample_exact(model, schedule, config, &mut rng),
    }
}

/// `n` samples generated in parallel; identical to sequential generation.
pub fn sample_batch<M: TwoHead + ?Sized>(
    model: &M,
    schedule: &Schedule,
    config: &SamplerConfig,
    n: usize,
) -> Result<(Vec<Vec<usize>>, SampleStats)> {
    let results: Vec<(Vec<usize>, SampleStats)> = (0..n)
        .into_par_iter()
        .map(|k| sample_one(model, schedule, config, k as u64))
        .collect::<Result<_>>()?;
    let stats = results.iter().fold(SampleStats::default(), |a, (_, s)| a.merge(*s));
    Ok((results.into_iter().map(|(x, _)| x).collect(), stats))
}

/// Empirical distribution of single-token samples.
pub fn histogram(samples: &[Vec<usize>], num_states: usize) -> Vec<f64> {
    let mut h = vec![0.0; num_states];
    for s in samples {
        h[s[0]] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Total variation distance `0.5 sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

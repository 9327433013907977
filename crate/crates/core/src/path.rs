//! Trajectories, path densities, Radon-Nikodym ratios and exact simulation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::ctmc::{RateFn, Schedule};
use crate::error::{domain, Error, Result};
use crate::quad;
use crate::rng::{categorical, exp1, mean_and_stderr, stream};
use crate::util::format_g;

/// Relative tolerance of every survival / hazard integral.
pub const SURVIVAL_REL_TOL: f64 = 1e-10;

/// Time resolution of the jump-time bisection.
pub const JUMP_TIME_TOL: f64 = 1e-9;

/// A piecewise-constant trajectory on `[start, end]`.
///
/// `jumps[k] = (t_k, x_k)`: the chain moves to `x_k` at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub initial_state: usize,
    pub start: f64,
    pub end: f64,
    pub jumps: Vec<(f64, usize)>,
}

impl Path {
    pub fn constant(state: usize, start: f64, end: f64) -> Self {
        Self { initial_state: state, start, end, jumps: Vec::new() }
    }

    /// Checks ordering, range and the no-self-jump rule.
    pub fn validate(&self) -> Result<()> {
        if !(self.start < self.end) {
            return Err(domain("path needs start < end"));
        }
        let mut prev_t = self.start;
        let mut prev_x = self.initial_state;
        for &(t, x) in &self.jumps {
            if !(t > prev_t && t < self.end) {
                return Err(domain(format!("jump time {t} out of order or outside ({}, {})", self.start, self.end)));
            }
            if x == prev_x {
                return Err(domain(format!("self-jump at t = {t}")));
            }
            prev_t = t;
            prev_x = x;
        }
        Ok(())
    }

    pub fn num_jumps(&self) -> usize {
        self.jumps.len()
    }

    pub fn final_state(&self) -> usize {
        self.jumps.last().map_or(self.initial_state, |&(_, x)| x)
    }

    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(tk, _)| tk <= t);
        if k == 0 {
            self.initial_state
        } else {
            self.jumps[k - 1].1
        }
    }

    /// `(from, to, state)` for each holding interval.
    pub fn holding_intervals(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.jumps.len() + 1);
        let (mut t, mut x) = (self.start, self.initial_state);
        for &(tk, xk) in &self.jumps {
            out.push((t, tk, x));
            t = tk;
            x = xk;
        }
        out.push((t, self.end, x));
        out
    }

    /// `(t_k, x_{k-1}, x_k)` for each jump.
    pub fn transitions(&self) -> Vec<(f64, usize, usize)> {
        let mut prev = self.initial_state;
        self.jumps
            .iter()
            .map(|&(t, x)| {
                let tr = (t, prev, x);
                prev = x;
                tr
            })
            .collect()
    }

    /// Maps a path simulated in reversed time `s = horizon - t` back to
    /// forward time. The result starts at the reversed path's final state.
    pub fn reverse_time(&self, horizon: f64) -> Path {
        let mut jumps = Vec::with_capacity(self.jumps.len());
        let mut before = self.initial_state;
        let mut pre_states = Vec::with_capacity(self.jumps.len());
        for &(s, x) in &self.jumps {
            pre_states.push((s, before));
            before = x;
        }
        for &(s, x) in pre_states.iter().rev() {
            jumps.push((horizon - s, x));
        }
        Path {
            initial_state: self.final_state(),
            start: horizon - self.end,
            end: horizon - self.start,
            jumps,
        }
    }

    /// Concatenation with a path that starts where this one ends.
    pub fn concat(&self, next: &Path) -> Result<Path> {
        if next.start != self.end || next.initial_state != self.final_state() {
            return Err(domain("paths do not join"));
        }
        let mut jumps = self.jumps.clone();
        jumps.extend_from_slice(&next.jumps);
        Ok(Path { initial_state: self.initial_state, start: self.start, end: next.end, jumps })
    }
}

/// Line record `x0 T n t1 s1 t2 s2 ...`, times to 12 significant digits.
/// The start time is implicit and equal to zero.
impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.initial_state, format_g(self.end, 12), self.jumps.len())?;
        for &(t, x) in &self.jumps {
            write!(f, " {} {}", format_g(t, 12), x)?;
        }
        Ok(())
    }
}

impl FromStr for Path {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Parse(format!("path record: {what}"));
        let mut tok = s.split_whitespace();
        let mut next = |what: &str| tok.next().ok_or_else(|| bad(what));
        let initial_state: usize = next("missing x0")?.parse().map_err(|_| bad("bad x0"))?;
        let end: f64 = next("missing T")?.parse().map_err(|_| bad("bad T"))?;
        let n: usize = next("missing n")?.parse().map_err(|_| bad("bad jump count"))?;
        let mut jumps = Vec::with_capacity(n);
        for _ in 0..n {
            let t: f64 = next("missing jump time")?.parse().map_err(|_| bad("bad jump time"))?;
            let x: usize = next("missing jump state")?.parse().map_err(|_| bad("bad jump state"))?;
            jumps.push((t, x));
        }
        if tok.next().is_some() {
            return Err(bad("trailing tokens"));
        }
        let path = Path { initial_state, start: 0.0, end, jumps };
        path.validate()?;
        Ok(path)
    }
}

/// A log-density that may be `-inf` because a realized jump has zero rate.
#[derive(Debug, Clone, PartialEq)]
pub enum LogDensity {
    Finite(f64),
    NegInfinity { time: f64, from: usize, to: usize },
}

impl LogDensity {
    pub fn value(&self) -> f64 {
        match self {
            Self::Finite(v) => *v,
            Self::NegInfinity { .. } => f64::NEG_INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Self::Finite(_))
    }
}

/// `int_a^b lambda_t(state) dt`, split at the generator's breakpoints.
pub fn integrated_exit_rate<R: RateFn + ?Sized>(rate: &R, state: usize, a: f64, b: f64) -> Result<f64> {
    if let Some(v) = rate.cumulative_exit(state, a, b) {
        return v;
    }
    let mut total = 0.0;
    for (lo, hi) in split_at(a, b, &rate.time_breakpoints()) {
        total += quad::adaptive(|t| rate.exit_rate(t, state), lo, hi, SURVIVAL_REL_TOL)?;
    }
    Ok(total)
}

fn split_at(a: f64, b: f64, breakpoints: &[f64]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&c| c > a && c < b).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut lo = a;
    for c in cuts {
        out.push((lo, c));
        lo = c;
    }
    out.push((lo, b));
    out
}

/// `sum_k log R_{t_k}(x_{k-1}, x_k) - int lambda_t(X_t) dt`.
pub fn log_path_density<R: RateFn + ?Sized>(rate: &R, path: &Path) -> Result<LogDensity> {
    path.validate()?;
    let mut jump_term = 0.0;
    for (t, from, to) in path.transitions() {
        let r = rate.rate(t, from, to)?;
        if !(r > 0.0) {
            return Ok(LogDensity::NegInfinity { time: t, from, to });
        }
        jump_term += r.ln();
    }
    let mut survival = 0.0;
    for (a, b, x) in path.holding_intervals() {
        survival += integrated_exit_rate(rate, x, a, b)?;
    }
    Ok(LogDensity::Finite(jump_term - survival))
}

/// Log Radon-Nikodym derivative of the model's reverse path measure
/// (started from `prior` at the path's end) against the forward measure,
/// evaluated on a forward-time path:
///
/// `log prior(x_n) + sum_k log[R^theta_{t_k}(x_k, x_{k-1}) / R_{t_k}(x_{k-1}, x_k)]
///  + int [lambda_t(X_t) - lambda^theta_t(X_t)] dt`.
///
/// `model` is the reverse generator indexed by forward time. A prior with
/// no mass at the final state is a domain error.
pub fn log_rn_derivative<F, M>(forward: &F, model: &M, prior: &[f64], path: &Path) -> Result<LogDensity>
where
    F: RateFn + ?Sized,
    M: RateFn + ?Sized,
{
    path.validate()?;
    let xn = path.final_state();
    let p = *prior.get(xn).ok_or_else(|| domain("prior shorter than the state space"))?;
    if !(p > 0.0) {
        return Err(domain(format!("prior has no mass at the terminal state {xn}")));
    }
    let mut total = p.ln();
    for (t, from, to) in path.transitions() {
        let fwd = forward.rate(t, from, to)?;
        if !(fwd > 0.0) {
            return Err(domain(format!("forward rate {from} -> {to} vanishes at t = {t}")));
        }
        let rev = model.rate(t, to, from)?;
        if !(rev > 0.0) {
            return Ok(LogDensity::NegInfinity { time: t, from: to, to: from });
        }
        total += (rev / fwd).ln();
    }
    let mut breaks = forward.time_breakpoints();
    breaks.extend(model.time_breakpoints());
    for (a, b, x) in path.holding_intervals() {
        for (lo, hi) in split_at(a, b, &breaks) {
            total += quad::adaptive(
                |t| Ok(forward.exit_rate(t, x)? - model.exit_rate(t, x)?),
                lo,
                hi,
                SURVIVAL_REL_TOL,
            )?;
        }
    }
    Ok(LogDensity::Finite(total))
}

/// A generator run backwards: rates at `s` are the inner rates at `horizon - s`.
#[derive(Debug, Clone, Copy)]
pub struct TimeReversed<R> {
    pub inner: R,
    pub horizon: f64,
}

impl<R: RateFn> RateFn for TimeReversed<R> {
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }
    fn rate(&self, s: f64, i: usize, j: usize) -> Result<f64> {
        self.inner.rate(self.horizon - s, i, j)
    }
    fn exit_rate(&self, s: f64, i: usize) -> Result<f64> {
        self.inner.exit_rate(self.horizon - s, i)
    }
    fn exit_jump(&self, s: f64, i: usize) -> Result<crate::ctmc::ExitJump> {
        self.inner.exit_jump(self.horizon - s, i)
    }
    fn time_breakpoints(&self) -> Vec<f64> {
        self.inner.time_breakpoints().iter().map(|b| self.horizon - b).collect()
    }
    fn cumulative_exit(&self, i: usize, a: f64, b: f64) -> Option<Result<f64>> {
        self.inner.cumulative_exit(i, self.horizon - b, self.horizon - a)
    }
}

/// Exact simulation by integrated-hazard inversion.
///
/// Each holding time solves `int_{t}^{t'} lambda_s ds = E`, `E ~ Exp(1)`: if
/// the hazard to `t_end` is below `E` the chain stays put, otherwise `t'` is
/// bracketed by bisection to [`JUMP_TIME_TOL`].
pub fn gillespie_sample<R, G>(rate: &R, x_init: usize, t_start: f64, t_end: f64, rng: &mut G) -> Result<Path>
where
    R: RateFn + ?Sized,
    G: Rng + ?Sized,
{
    if !(t_start < t_end) {
        return Err(domain("gillespie_sample needs t_start < t_end"));
    }
    if x_init >= rate.num_states() {
        return Err(domain(format!("state {x_init} out of range")));
    }
    let sim_err = |e: Error| match e {
        Error::NonFinite(m) => Error::Simulation(format!("non-finite rate: {m}")),
        other => other,
    };
    let breaks = rate.time_breakpoints();
    let hazard = |x: usize, a: f64, b: f64| -> Result<f64> {
        let h = match rate.cumulative_exit(x, a, b) {
            Some(v) => v?,
            None => {
                let mut h = 0.0;
                for (lo, hi) in split_at(a, b, &breaks) {
                    h += quad::adaptive(|t| rate.exit_rate(t, x), lo, hi, SURVIVAL_REL_TOL)?;
                }
                h
            }
        };
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("hazard over [{a}, {b}]")));
        }
        Ok(h)
    };

    let mut path = Path::constant(x_init, t_start, t_end);
    let (mut t, mut x) = (t_start, x_init);
    loop {
        let e = exp1(rng);
        if hazard(x, t, t_end).map_err(sim_err)? <= e {
            return Ok(path);
        }
        let (mut lo, mut hi, mut acc) = (t, t_end, 0.0);
        while hi - lo > JUMP_TIME_TOL {
            let mid = 0.5 * (lo + hi);
            let h = hazard(x, lo, mid).map_err(sim_err)?;
            if acc + h < e {
                acc += h;
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_next = hi.min(t_end);
        let split = rate.exit_jump(t_next, x).map_err(sim_err)?;
        let dest = match categorical(rng, &split.jump_dist) {
            Some(j) if j != x => j,
            _ => {
                // Hazard came from the left of t_next; take the left limit.
                let left = rate.exit_jump(lo.max(t), x).map_err(sim_err)?;
                match categorical(rng, &left.jump_dist) {
                    Some(j) if j != x => j,
                    _ => return Err(Error::Simulation(format!("no jump destination at t = {t_next}"))),
                }
            }
        };
        if t_next >= t_end {
            return Ok(path);
        }
        path.jumps.push((t_next, dest));
        t = t_next;
        x = dest;
    }
}

/// `n` independent paths; path `k` uses stream `k` of `seed`.
pub fn gillespie_batch<R: RateFn + ?Sized>(
    rate: &R,
    x_init: impl Fn(&mut crate::rng::SimRng) -> usize + Sync,
    t_start: f64,
    t_end: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Path>> {
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, k as u64);
            let x0 = x_init(&mut rng);
            gillespie_sample(rate, x0, t_start, t_end, &mut rng)
        })
        .collect()
}

/// Monte Carlo and quadrature sides of the Campbell-Mecke identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampbellMecke {
    pub mc_estimate: f64,
    pub std_error: f64,
    pub analytic: f64,
}

/// Compares `E[sum_k f(t_k, x_{k-1}, x_k)]` over forward paths on
/// `[0, t_end]` from `x0` with
/// `int_0^{t_end} sum_i q_{t|0}(i | x0) sum_{j != i} R_t(i, j) f(t, i, j) dt`.
pub fn campbell_mecke_check<R, F>(
    rate: &R,
    schedule: &Schedule,
    x0: usize,
    t_end: f64,
    f: F,
    n_paths: usize,
    seed: u64,
) -> Result<CampbellMecke>
where
    R: RateFn + ?Sized,
    F: Fn(f64, usize, usize) -> f64 + Sync,
{
    let paths = gillespie_batch(rate, |_| x0, 0.0, t_end, n_paths, seed)?;
    let sums: Vec<f64> = paths
        .iter()
        .map(|p| p.transitions().iter().map(|&(t, a, b)| f(t, a, b)).sum())
        .collect();
    let (mc_estimate, std_error) = mean_and_stderr(&sums);
    let s = schedule.num_states();
    let integrand = |t: f64| -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..s {
            let qi = schedule.kernel_prob(t, x0, i);
            if qi == 0.0 {
                continue;
            }
            for j in 0..s {
                if j != i {
                    let r = rate.rate(t, i, j)?;
                    if r != 0.0 {
                        acc += qi * r * f(t, i, j);
                    }
                }
            }
        }
        Ok(acc)
    };
    let mut analytic = 0.0;
    for (lo, hi) in split_at(0.0, t_end, &rate.time_breakpoints()) {
        analytic += quad::adaptive(integrand, lo, hi, SURVIVAL_REL_TOL)?;
    }
    Ok(CampbellMecke { mc_estimate, std_error, analytic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{AlphaFamily, DenseRate, ForwardRate};
    use crate::rng::seeded;

    fn two_state(a: f64, b: f64) -> DenseRate {
        DenseRate::from_off_diagonal(2, vec![0.0, a, b, 0.0]).unwrap()
    }

    #[test]
    fn no_jump_density_is_pure_survival() {
        let r = two_state(1.5, 0.5);
        let d = log_path_density(&r, &Path::constant(0, 0.0, 2.0)).unwrap();
        assert!((d.value() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_jump_density_closed_form() {
        let r = two_state(1.5, 0.5);
        let p = Path { initial_state: 0, start: 0.0, end: 1.0, jumps: vec![(0.3, 1)] };
        let want = 1.5f64.ln() - 1.5 * 0.3 - 0.5 * 0.7;
        assert!((log_path_density(&r, &p).unwrap().value() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_jump_is_neg_infinity() {
        let r = two_state(0.0, 0.5);
        let p = Path { initial_state: 0, start: 0.0, end: 1.0, jumps: vec![(0.3, 1)] };
        assert_eq!(
            log_path_density(&r, &p).unwrap(),
            LogDensity::NegInfinity { time: 0.3, from: 0, to: 1 }
        );
    }

    #[test]
    fn record_round_trip() {
        let p = Path { initial_state: 2, start: 0.0, end: 1.0, jumps: vec![(0.125, 0), (0.5, 1)] };
        let text = p.to_string();
        assert_eq!(text, "2 1 2 0.125 0 0.5 1");
        assert_eq!(text.parse::<Path>().unwrap(), p);
        assert!("2 1 1 0.5 2".parse::<Path>().is_err());
        assert!("0 1 2 0.5 1".parse::<Path>().is_err());
    }

    #[test]
    fn reverse_time_is_an_involution() {
        let p = Path { initial_state: 0, start: 0.0, end: 2.0, jumps: vec![(0.5, 1), (1.5, 2)] };
        let r = p.reverse_time(2.0);
        assert_eq!(r.initial_state, 2);
        assert_eq!(r.jumps, vec![(0.5, 1), (1.5, 0)]);
        assert_eq!(r.reverse_time(2.0), p);
    }

    #[test]
    fn absorbing_chain_never_jumps() {
        let r = two_state(0.0, 0.0);
        let p = gillespie_sample(&r, 1, 0.0, 5.0, &mut seeded(1)).unwrap();
        assert_eq!(p.num_jumps(), 0);
    }

    #[test]
    fn gillespie_is_deterministic_per_seed() {
        let s = Schedule::uniform(4, AlphaFamily::Cosine, 1.0).unwrap();
        let r = ForwardRate::new(&s);
        let a = gillespie_sample(&r, 0, 0.0, 0.9, &mut seeded(7)).unwrap();
        let b = gillespie_sample(&r, 0, 0.0, 0.9, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn batch_matches_sequential() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let r = ForwardRate::new(&s);
        let batch = gillespie_batch(&r, |_| 1, 0.0, 0.9, 64, 11).unwrap();
        for (k, p) in batch.iter().enumerate() {
            let mut rng = stream(11, k as u64);
            assert_eq!(*p, gillespie_sample(&r, 1, 0.0, 0.9, &mut rng).unwrap());
        }
    }

    #[test]
    fn rn_derivative_on_symmetric_chain() {
        let r = two_state(0.7, 0.7);
        let p = Path { initial_state: 0, start: 0.0, end: 1.0, jumps: vec![(0.2, 1), (0.6, 0), (0.9, 1)] };
        let d = log_rn_derivative(&r, &r, &[0.5, 0.5], &p).unwrap();
        assert!((d.value() - 0.5f64.ln()).abs() < 1e-12);
        assert!(log_rn_derivative(&r, &r, &[1.0, 0.0], &p).is_err());
    }

    #[test]
    fn campbell_mecke_zero_function() {
        let s = Schedule::uniform(2, AlphaFamily::Linear, 1.0).unwrap();
        let r = ForwardRate::new(&s);
        let c = campbell_mecke_check(&r, &s, 0, 0.9, |_, _, _| 0.0, 100, 1).unwrap();
        assert_eq!((c.mc_estimate, c.analytic), (0.0, 0.0));
    }
}

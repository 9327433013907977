//! Brute-force reference computations. These deliberately re-derive
//! quantities from first principles rather than calling the code paths
//! they are used to check.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ctmc::{marginal_reverse, rate_from_schedule, ExitJump, RateFn, ReverseTarget, Schedule};
use crate::error::{domain, Error, Result};
use crate::model::{check_sequence, HeadOutput, TwoHead};
use crate::quad::TimeGrid;
use crate::util::format_g;

/// Exact marginals `q_t` and posteriors `p(x0 | x_t)` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub t_grid: Vec<f64>,
    /// `q[k][x]` at `t_grid[k]`.
    pub q: Vec<Vec<f64>>,
    /// `posterior[k][x][x0]`; equal to `p_data` where `q_t(x) = 0`.
    pub posterior: Vec<Vec<Vec<f64>>>,
}

impl MarginalTable {
    /// CSV with header `t,state,q,posterior_0,...,posterior_{S-1}`.
    pub fn to_csv(&self) -> String {
        let s = self.q.first().map_or(0, Vec::len);
        let mut out = String::from("t,state,q");
        for k in 0..s {
            let _ = write!(out, ",posterior_{k}");
        }
        out.push('\n');
        for (k, &t) in self.t_grid.iter().enumerate() {
            for x in 0..s {
                let _ = write!(out, "{},{x},{}", format_g(t, 12), format_g(self.q[k][x], 17));
                for p in &self.posterior[k][x] {
                    let _ = write!(out, ",{}", format_g(*p, 17));
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn exact_marginals(schedule: &Schedule, p_data: &[f64], t_grid: &[f64]) -> Result<MarginalTable> {
    let s = schedule.num_states();
    if p_data.len() != s {
        return Err(domain("p_data length must equal num_states"));
    }
    let mut q = Vec::with_capacity(t_grid.len());
    let mut posterior = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(0.0..=schedule.horizon()).contains(&t) {
            return Err(domain(format!("t = {t} outside [0, T]")));
        }
        let a = schedule.alpha(t);
        // joint[x][x0] = p(x0) q_{t|0}(x | x0)
        let joint: Vec<Vec<f64>> = (0..s)
            .map(|x| {
                (0..s)
                    .map(|x0| {
                        let k = if x == x0 { a } else { 0.0 } + (1.0 - a) * schedule.pi()[x];
                        p_data[x0] * k
                    })
                    .collect()
            })
            .collect();
        let qt: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
        let post = joint
            .iter()
            .zip(&qt)
            .map(|(row, &m)| if m > 0.0 { row.iter().map(|v| v / m).collect() } else { p_data.to_vec() })
            .collect();
        q.push(qt);
        posterior.push(post);
    }
    Ok(MarginalTable { t_grid: t_grid.to_vec(), q, posterior })
}

/// Result of integrating the master equation.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub q: Vec<f64>,
    /// Largest `|sum q - 1|` seen before renormalizing.
    pub max_drift: f64,
}

/// Classical RK4 for `dq/dt = q R_t` from `t_start` to `t_end`, renormalized
/// after every step.
pub fn integrate_master_equation<R: RateFn + ?Sized>(
    rate: &R,
    q0: &[f64],
    t_start: f64,
    t_end: f64,
    step: f64,
) -> Result<MasterSolution> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(domain("master-equation step must lie in (0, 1e-3]"));
    }
    let s = rate.num_states();
    if q0.len() != s || !(t_end >= t_start) {
        return Err(domain("bad master-equation inputs"));
    }
    let deriv = |t: f64, q: &[f64]| -> Result<Vec<f64>> {
        let mut d = vec![0.0; s];
        for i in 0..s {
            if q[i] == 0.0 {
                continue;
            }
            for j in 0..s {
                if i != j {
                    let r = rate.rate(t, i, j)?;
                    d[j] += q[i] * r;
                    d[i] -= q[i] * r;
                }
            }
        }
        Ok(d)
    };
    let n = ((t_end - t_start) / step).ceil().max(1.0) as usize;
    let h = (t_end - t_start) / n as f64;
    let mut q = q0.to_vec();
    let mut max_drift: f64 = 0.0;
    let axpy = |q: &[f64], k: &[f64], c: f64| -> Vec<f64> { q.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    for k in 0..n {
        let t = t_start + k as f64 * h;
        let k1 = deriv(t, &q)?;
        let k2 = deriv(t + 0.5 * h, &axpy(&q, &k1, 0.5 * h))?;
        let k3 = deriv(t + 0.5 * h, &axpy(&q, &k2, 0.5 * h))?;
        let k4 = deriv(t + h, &axpy(&q, &k3, h))?;
        for x in 0..s {
            q[x] += h / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
        }
        let total: f64 = q.iter().sum();
        max_drift = max_drift.max((total - 1.0).abs());
        q.iter_mut().for_each(|v| *v /= total);
    }
    Ok(MasterSolution { q, max_drift })
}

/// `-log p_theta(x0)` for a single-token model by marginalizing the reverse
/// chain started from `pi` at `T - eps`: Euler transition products
/// `(I + h R^theta)` with steps aligned to model breakpoints, on `grid_size`
/// and `2 grid_size` steps, Richardson-extrapolated.
pub fn exact_nll_small_chain<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, x0: usize, grid_size: usize) -> Result<f64> {
    let s = schedule.num_states();
    if s > 4 || model.seq_len() != 1 || model.num_states() != s || x0 >= s {
        return Err(domain("exact NLL needs S <= 4 and a single-token model"));
    }
    if grid_size < 10_000 {
        return Err(domain("exact NLL needs grid_size >= 1e4"));
    }
    let coarse = reverse_chain_prob(schedule, model, x0, grid_size)?;
    let fine = reverse_chain_prob(schedule, model, x0, 2 * grid_size)?;
    let p = 2.0 * fine - coarse;
    if !(p > 0.0) {
        return Err(Error::NonFinite(format!("extrapolated p_theta(x0) = {p}")));
    }
    Ok(-p.ln())
}

fn reverse_chain_prob<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, x0: usize, steps: usize) -> Result<f64> {
    let s = schedule.num_states();
    let top = schedule.upper_time();
    let mut edges = vec![0.0];
    let mut bps: Vec<f64> = model.time_breakpoints().into_iter().filter(|&b| b > 0.0 && b < top).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    edges.extend(bps);
    edges.push(top);
    let mut p = schedule.pi().to_vec();
    for seg in edges.windows(2).rev() {
        let len = seg[1] - seg[0];
        let n = ((steps as f64 * len / top).round() as usize).max(1);
        let h = len / n as f64;
        for k in (0..n).rev() {
            let t_mid = seg[0] + (k as f64 + 0.5) * h;
            let mut next = p.clone();
            for i in 0..s {
                if p[i] == 0.0 {
                    continue;
                }
                let head = model.head(t_mid, i)?;
                for j in 0..s {
                    if j != i {
                        let flow = p[i] * h * head.rate_to(j);
                        next[j] += flow;
                        next[i] -= flow;
                    }
                }
            }
            p = next;
        }
    }
    Ok(p[x0])
}

/// Central differences `(L(theta + h e_k) - L(theta - h e_k)) / 2h` at `coords`.
pub fn finite_difference_gradient<F>(mut loss: F, params: &[f64], coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-8..=1e-4).contains(&step) {
        return Err(domain("finite-difference step must lie in [1e-8, 1e-4]"));
    }
    let mut theta = params.to_vec();
    coords
        .iter()
        .map(|&k| {
            let orig = theta[k];
            theta[k] = orig + step;
            let up = loss(&theta)?;
            theta[k] = orig - step;
            let down = loss(&theta)?;
            theta[k] = orig;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Reverse rates from a dense forward generator and brute-force marginals:
/// `R_t(j, i) q_t(j) / q_t(i)`.
pub fn brute_force_reverse(schedule: &Schedule, p_data: &[f64], t: f64, i: usize) -> Result<ReverseTarget> {
    let table = exact_marginals(schedule, p_data, &[t])?;
    let q = &table.q[0];
    if !(q[i] > 0.0) {
        return Err(Error::Unreachable { state: i, t, prob: q[i] });
    }
    let dense = rate_from_schedule(schedule, t)?;
    let per_pair = (0..schedule.num_states())
        .map(|j| if j == i { 0.0 } else { dense.get(j, i) * q[j] / q[i] })
        .collect();
    Ok(ReverseTarget::from_per_pair(i, per_pair))
}

/// Minimizer of the expected loss over `t ~ U(lo, hi)` for a model that is
/// constant on that interval: each per-pair rate is the `q_t(i)`-weighted
/// time average of the true reverse rate.
pub fn interval_optimal_head(schedule: &Schedule, p_data: &[f64], lo: f64, hi: f64, i: usize) -> Result<ExitJump> {
    if !(hi > lo) {
        return Err(domain(format!("empty interval [{lo}, {hi}]")));
    }
    let grid = TimeGrid::composite(lo, hi, 64, &[]);
    let s = schedule.num_states();
    let mut mass = 0.0;
    let mut rates = vec![0.0; s];
    for (&t, &w) in grid.nodes.iter().zip(&grid.weights) {
        let q = schedule.marginal(t, p_data)?[i];
        if !(q > 0.0) {
            continue;
        }
        let target = marginal_reverse(schedule, p_data, t, i)?;
        mass += w * q;
        for (r, v) in rates.iter_mut().zip(&target.per_pair) {
            *r += w * q * v;
        }
    }
    if !(mass > 0.0) {
        return Err(Error::Unreachable { state: i, t: lo, prob: 0.0 });
    }
    let exit_rate: f64 = rates.iter().sum::<f64>() / mass;
    let jump_dist = if exit_rate > 0.0 {
        let total: f64 = rates.iter().sum();
        rates.iter().map(|r| r / total).collect()
    } else {
        vec![0.0; s]
    };
    Ok(ExitJump { exit_rate, jump_dist })
}

/// The true reverse process of a single token as a two-head model.
#[derive(Debug, Clone)]
pub struct ExactReverse<'a> {
    schedule: &'a Schedule,
    p_data: Vec<f64>,
}

impl<'a> ExactReverse<'a> {
    pub fn new(schedule: &'a Schedule, p_data: &[f64]) -> Result<Self> {
        if p_data.len() != schedule.num_states() {
            return Err(domain("p_data length must equal num_states"));
        }
        Ok(Self { schedule, p_data: p_data.to_vec() })
    }
}

impl TwoHead for ExactReverse<'_> {
    fn num_states(&self) -> usize {
        self.schedule.num_states()
    }
    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput> {
        check_sequence(x, 1, self.num_states())?;
        Ok(HeadOutput { per_position: vec![self.head(t, x[0])?] })
    }
    fn head(&self, t: f64, i: usize) -> Result<ExitJump> {
        Ok(marginal_reverse(self.schedule, &self.p_data, t, i)?.exit_jump())
    }
}

/// The true reverse process of a sequence whose tokens are noised
/// independently, for data supported on an explicit list of sequences.
///
/// Position `l` jumps `i -> j` at rate `R_t(j, i) q_t(x^{l <- j}) / q_t(x)`.
#[derive(Debug, Clone)]
pub struct ExactSequenceReverse<'a> {
    schedule: &'a Schedule,
    support: Vec<(Vec<usize>, f64)>,
    seq_len: usize,
}

impl<'a> ExactSequenceReverse<'a> {
    pub fn new(schedule: &'a Schedule, support: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let seq_len = support.first().map(|(x, _)| x.len()).ok_or_else(|| domain("empty support"))?;
        for (x, p) in &support {
            check_sequence(x, seq_len, schedule.num_states())?;
            if !(*p >= 0.0) {
                return Err(domain("support weights must be nonnegative"));
            }
        }
        Ok(Self { schedule, support, seq_len })
    }

    /// `q_t(x)` up to the normalization of the support weights.
    pub fn marginal(&self, x: &[usize], t: f64) -> f64 {
        self.support
            .iter()
            .map(|(x0, p)| p * x.iter().zip(x0).map(|(&a, &b)| self.schedule.kernel_prob(t, b, a)).product::<f64>())
            .sum()
    }
}

impl TwoHead for ExactSequenceReverse<'_> {
    fn num_states(&self) -> usize {
        self.schedule.num_states()
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput> {
        let s = self.num_states();
        check_sequence(x, self.seq_len, s)?;
        let qx = self.marginal(x, t);
        if !(qx > 0.0) {
            return Err(Error::Unreachable { state: x[0], t, prob: qx });
        }
        let dense = rate_from_schedule(self.schedule, t)?;
        let mut y = x.to_vec();
        let per_position = (0..x.len())
            .map(|l| {
                let i = x[l];
                let row: Vec<f64> = (0..s)
                    .map(|j| {
                        if j == i {
                            return 0.0;
                        }
                        y[l] = j;
                        let v = dense.get(j, i) * self.marginal(&y, t) / qx;
                        y[l] = i;
                        v
                    })
                    .collect();
                ExitJump::from_row(i, &row)
            })
            .collect();
        Ok(HeadOutput { per_position })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{marginal_reverse, AlphaFamily, ForwardRate};

    #[test]
    fn stationary_data_stays_put() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let pi = s.pi().to_vec();
        let tab = exact_marginals(&s, &pi, &[0.0, 0.3, 0.9]).unwrap();
        for row in &tab.q {
            for (a, b) in row.iter().zip(&pi) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn master_equation_matches_kernel() {
        let s = Schedule::uniform(3, AlphaFamily::Cosine, 1.0).unwrap();
        let sol = integrate_master_equation(&ForwardRate::new(&s), &[1.0, 0.0, 0.0], 0.0, 0.8, 1e-3).unwrap();
        let k = s.forward_kernel(0.8, 0).unwrap();
        let tv: f64 = 0.5 * sol.q.iter().zip(&k).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 1e-6);
        assert!(sol.max_drift < 1e-9);
    }

    #[test]
    fn brute_force_reverse_agrees_with_closed_form() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let p = [0.5, 0.3, 0.2];
        let a = brute_force_reverse(&s, &p, 0.4, 1).unwrap();
        let b = marginal_reverse(&s, &p, 0.4, 1).unwrap();
        for j in 0..3 {
            assert!((a.per_pair[j] - b.per_pair[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_reverse_reduces_to_single_token() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let seq = ExactSequenceReverse::new(&s, vec![(vec![0], 0.7), (vec![2], 0.3)]).unwrap();
        let single = ExactReverse::new(&s, &[0.7, 0.0, 0.3]).unwrap();
        let a = seq.head(0.5, 1).unwrap();
        let b = single.head(0.5, 1).unwrap();
        assert!((a.exit_rate - b.exit_rate).abs() < 1e-12);
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let g = finite_difference_gradient(|p| Ok(p[0] * p[0] + 3.0 * p[1]), &[2.0, 1.0], &[0, 1], 1e-6).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8 * 4.0);
        assert!((g[1] - 3.0).abs() < 1e-8 * 3.0);
    }
}

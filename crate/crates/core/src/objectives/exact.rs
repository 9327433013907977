//! Objectives evaluated exactly by enumeration over an explicit `p_data`
//! and deterministic quadrature in time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::divergence::{bregman_density, cross_entropy, entropy, poisson_kl, xlogx, Divergence};
use super::losses::{row_loss, ConditionalRow, LossKind};
use crate::ctmc::{marginal_reverse, ExitJump, ForwardRate, RateFn, Schedule};
use crate::error::{domain, Error, Result};
use crate::model::{HeadGrad, Trainable, TwoHead};
use crate::quad::{self, TimeGrid};
use crate::rng::{categorical, mean_and_stderr, open_unit, pairwise_sum, stream};

/// Default node count of the composite rule used by exact objectives.
pub const DEFAULT_QUAD_POINTS: usize = 64;

/// Relative tolerance of the adaptive time integral in [`elbo`].
pub const ELBO_REL_TOL: f64 = 1e-10;

fn check_p_data(schedule: &Schedule, p_data: &[f64]) -> Result<()> {
    if p_data.len() != schedule.num_states() {
        return Err(domain("p_data length must equal num_states"));
    }
    let total: f64 = p_data.iter().sum();
    if p_data.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-10 {
        return Err(domain("p_data must be a probability vector"));
    }
    Ok(())
}

fn single_token<M: TwoHead + ?Sized>(model: &M, schedule: &Schedule) -> Result<()> {
    if model.seq_len() != 1 || model.num_states() != schedule.num_states() {
        return Err(domain("exact objectives need a single-token model over the schedule's states"));
    }
    Ok(())
}

fn heads_at<M: TwoHead + ?Sized>(model: &M, t: f64) -> Result<Vec<ExitJump>> {
    (0..model.num_states()).map(|i| model.head(t, i)).collect()
}

fn exact_grid<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, quad_points: usize) -> Result<TimeGrid> {
    if quad_points < 8 {
        return Err(domain("quad_points must be at least 8"));
    }
    Ok(TimeGrid::composite(
        schedule.lower_time(),
        schedule.upper_time(),
        quad_points,
        &model.time_breakpoints(),
    ))
}

/// Variational bound on `-log p_theta(x0)` for a single-token model whose
/// reverse chain starts from `pi` at `T - eps`:
/// `-E_{q_{T-eps|0}}[log pi] + int_0^{T-eps} sum_i q_{t|0}(i | x0) l_t(i) dt` with
/// `l_t(i) = sum_{j != i} [R(i,j) log(R(i,j) / R^theta(j,i)) - R(i,j) + R^theta(i,j)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Elbo {
    pub prior_term: f64,
    pub path_term: f64,
    pub total: f64,
}

pub fn elbo<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, x0: usize) -> Result<Elbo> {
    single_token(model, schedule)?;
    let s = schedule.num_states();
    if x0 >= s {
        return Err(domain("x0 out of range"));
    }
    let t_top = schedule.upper_time();
    let mut prior_term = 0.0;
    for i in 0..s {
        let q = schedule.kernel_prob(t_top, x0, i);
        if q > 0.0 {
            let p = schedule.pi()[i];
            if !(p > 0.0) {
                return Err(domain(format!("prior has no mass at reachable state {i}")));
            }
            prior_term -= q * p.ln();
        }
    }
    let fwd = ForwardRate::new(schedule);
    let integrand = |t: f64| -> Result<f64> {
        let heads = heads_at(model, t)?;
        let mut acc = 0.0;
        for i in 0..s {
            let qi = schedule.kernel_prob(t, x0, i);
            if qi == 0.0 {
                continue;
            }
            let mut ell = 0.0;
            for j in 0..s {
                if j == i {
                    continue;
                }
                let r = fwd.rate(t, i, j)?;
                let back = heads[j].rate_to(i);
                if r > 0.0 {
                    if !(back > 0.0) {
                        return Ok(f64::INFINITY);
                    }
                    ell += r * (r / back).ln() - r;
                }
                ell += heads[i].rate_to(j);
            }
            acc += qi * ell;
        }
        Ok(acc)
    };
    let mut edges = vec![0.0];
    let mut bps: Vec<f64> = model.time_breakpoints().into_iter().filter(|&b| b > 0.0 && b < t_top).collect();
    bps.sort_by(f64::total_cmp);
    edges.extend(bps);
    edges.push(t_top);
    let mut path_term = 0.0;
    for w in edges.windows(2) {
        path_term += quad::adaptive(integrand, w[0], w[1], ELBO_REL_TOL)?;
    }
    Ok(Elbo { prior_term, path_term, total: prior_term + path_term })
}

/// Exact conditional surrogate `L_KL` by enumeration over `(x0, x_t)`.
pub fn exact_l_kl<M: TwoHead + ?Sized>(schedule: &Schedule, p_data: &[f64], model: &M, quad_points: usize) -> Result<f64> {
    exact_expected_loss(LossKind::Kl, schedule, p_data, model, quad_points)
}

/// `int E_{x0, x_t ~ q_{t|0}}[loss] dt` over `[eps, T - eps]` for any per-sample loss.
pub fn exact_expected_loss<M: TwoHead + ?Sized>(
    kind: LossKind,
    schedule: &Schedule,
    p_data: &[f64],
    model: &M,
    quad_points: usize,
) -> Result<f64> {
    exact_objective(schedule, p_data, model, quad_points, Target::Conditional(kind), None::<(&crate::model::Tabular, &mut Vec<f64>)>)
}

/// Exact reverse-process KL `KL(Q_hat || P^theta)` (without the prior term).
pub fn exact_marginal_kl<M: TwoHead + ?Sized>(schedule: &Schedule, p_data: &[f64], model: &M, quad_points: usize) -> Result<f64> {
    exact_objective(schedule, p_data, model, quad_points, Target::Marginal, None::<(&crate::model::Tabular, &mut Vec<f64>)>)
}

/// [`exact_l_kl`] and its parameter gradient.
pub fn exact_l_kl_grad<M: Trainable + ?Sized>(schedule: &Schedule, p_data: &[f64], model: &M, quad_points: usize) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; model.params().len()];
    let v = exact_objective(schedule, p_data, model, quad_points, Target::Conditional(LossKind::Kl), Some((model, &mut g)))?;
    Ok((v, g))
}

/// [`exact_marginal_kl`] and its parameter gradient.
pub fn exact_marginal_kl_grad<M: Trainable + ?Sized>(schedule: &Schedule, p_data: &[f64], model: &M, quad_points: usize) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; model.params().len()];
    let v = exact_objective(schedule, p_data, model, quad_points, Target::Marginal, Some((model, &mut g)))?;
    Ok((v, g))
}

#[derive(Clone, Copy, PartialEq)]
enum Target {
    Conditional(LossKind),
    Marginal,
}

type GradSink<'a, M> = Option<(&'a M, &'a mut Vec<f64>)>;

fn exact_objective<M: TwoHead + ?Sized, T: Trainable + ?Sized>(
    schedule: &Schedule,
    p_data: &[f64],
    model: &M,
    quad_points: usize,
    target: Target,
    mut grad: GradSink<'_, T>,
) -> Result<f64> {
    check_p_data(schedule, p_data)?;
    single_token(model, schedule)?;
    let s = schedule.num_states();
    let grid = exact_grid(schedule, model, quad_points)?;
    let mut total = 0.0;
    for (&t, &w) in grid.nodes.iter().zip(&grid.weights) {
        let heads = heads_at(model, t)?;
        let q = schedule.marginal(t, p_data)?;
        for i in 0..s {
            if q[i] == 0.0 {
                continue;
            }
            // (weight, row) pairs whose KL rows contribute at (t, i).
            let mut rows: Vec<(f64, ConditionalRow)> = Vec::new();
            match target {
                Target::Conditional(_) => {
                    for (x0, &p) in p_data.iter().enumerate() {
                        let qc = schedule.kernel_prob(t, x0, i);
                        if p > 0.0 && qc > 0.0 {
                            rows.push((p * qc, ConditionalRow::new(schedule, t, x0, i)?));
                        }
                    }
                }
                Target::Marginal => {
                    let tgt = marginal_reverse(schedule, p_data, t, i)?;
                    let rho = schedule.rate_coefficient(t)?;
                    let inflow_rate = rho * schedule.pi()[i];
                    let mut inflow = vec![inflow_rate; s];
                    inflow[i] = 0.0;
                    let ratio = (0..s)
                        .map(|j| if j == i || inflow_rate == 0.0 { 0.0 } else { tgt.per_pair[j] / inflow_rate })
                        .collect();
                    rows.push((q[i], ConditionalRow { state: i, inflow, ratio }));
                }
            }
            let kind = match target {
                Target::Conditional(k) => k,
                Target::Marginal => LossKind::Kl,
            };
            for (weight, row) in rows {
                let (loss, g) = row_loss(kind, &row, &heads[i])?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss row at t = {t}, state {i}")));
                }
                total += w * weight * loss.total;
                if let Some((m, acc)) = grad.as_mut() {
                    let mut g = g;
                    g.scale(w * weight);
                    m.backward_into(&[i], t, &HeadGrad { per_position: vec![g] }, acc)?;
                }
            }
        }
    }
    Ok(total)
}

/// `E[R log R] - E[R] log E[R]` for one reverse pair under the posterior
/// `p(x0 | x_t = i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub t: f64,
    pub i: usize,
    pub j: usize,
    pub delta: f64,
}

/// The surrogate/true-KL decomposition `L_KL = KL(Q_hat || P^theta) + C_gap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub l_kl_value: f64,
    pub marginal_kl_value: f64,
    /// `int sum_i q_t(i) sum_j Delta_{t,i,j} dt`, computed from the deltas alone.
    pub c_gap: f64,
    /// `int sum_i q_t(i) lambda_hat H(r_hat) dt`, the offset between the
    /// cross-entropy form of the marginal loss and the marginal KL.
    pub entropy_constant: f64,
    pub per_pair_delta: Vec<PairDelta>,
}

pub fn compute_gap<M: TwoHead + ?Sized>(schedule: &Schedule, p_data: &[f64], model: &M, quad_points: usize) -> Result<GapReport> {
    let l_kl_value = exact_l_kl(schedule, p_data, model, quad_points)?;
    let marginal_kl_value = exact_marginal_kl(schedule, p_data, model, quad_points)?;
    let s = schedule.num_states();
    let grid = exact_grid(schedule, model, quad_points)?;
    let mut c_gap = 0.0;
    let mut entropy_constant = 0.0;
    let mut per_pair_delta = Vec::new();
    for (&t, &w) in grid.nodes.iter().zip(&grid.weights) {
        let q = schedule.marginal(t, p_data)?;
        for i in 0..s {
            if q[i] == 0.0 {
                continue;
            }
            let tgt = marginal_reverse(schedule, p_data, t, i)?;
            entropy_constant += w * q[i] * tgt.exit_rate * entropy(&tgt.jump_dist);
            let post: Vec<f64> = (0..s).map(|x0| p_data[x0] * schedule.kernel_prob(t, x0, i) / q[i]).collect();
            let rows: Vec<Option<ConditionalRow>> = (0..s)
                .map(|x0| {
                    if post[x0] > 0.0 {
                        ConditionalRow::new(schedule, t, x0, i).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?;
            for j in 0..s {
                if j == i {
                    continue;
                }
                let mut e_rlogr = 0.0;
                let mut e_r = 0.0;
                for (x0, row) in rows.iter().enumerate() {
                    if let Some(row) = row {
                        let r = row.rate_to(j);
                        e_rlogr += post[x0] * xlogx(r);
                        e_r += post[x0] * r;
                    }
                }
                let delta = e_rlogr - xlogx(e_r);
                c_gap += w * q[i] * delta;
                per_pair_delta.push(PairDelta { t, i, j, delta });
            }
        }
    }
    Ok(GapReport { l_kl_value, marginal_kl_value, c_gap, entropy_constant, per_pair_delta })
}

/// Monte Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of the marginal loss
/// `(T - 2 eps) E_{t, x_t ~ q_t}[KL^Poi(lambda_hat || lambda) + lambda_hat CE(r_hat, r)]`
/// with `t ~ U(eps, T - eps)`. Sample `k` uses stream `k` of `seed`.
pub fn mc_marginal_loss<M: TwoHead + ?Sized>(schedule: &Schedule, p_data: &[f64], model: &M, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_p_data(schedule, p_data)?;
    single_token(model, schedule)?;
    if n_samples < 2 {
        return Err(domain("mc_marginal_loss needs at least two samples"));
    }
    let (lo, hi) = (schedule.lower_time(), schedule.upper_time());
    let values: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mut rng = stream(seed, k as u64);
            let x0 = categorical(&mut rng, p_data).ok_or_else(|| domain("empty p_data"))?;
            let t = lo + (hi - lo) * open_unit(&mut rng);
            let kernel = schedule.forward_kernel(t, x0)?;
            let xt = categorical(&mut rng, &kernel).ok_or_else(|| domain("empty kernel"))?;
            let tgt = marginal_reverse(schedule, p_data, t, xt)?;
            let head = model.head(t, xt)?;
            let v = if tgt.exit_rate == 0.0 {
                head.exit_rate
            } else {
                let ce = match cross_entropy(&tgt.jump_dist, &head.jump_dist)? {
                    Divergence::Finite(v) => v,
                    Divergence::Infinite { .. } => f64::INFINITY,
                };
                poisson_kl(tgt.exit_rate, head.exit_rate)? + tgt.exit_rate * ce
            };
            Ok((hi - lo) * v)
        })
        .collect::<Result<_>>()?;
    let (mean, std_error) = mean_and_stderr(&values);
    Ok(McEstimate { mean, std_error })
}

/// Pairwise-summed batch mean, the reduction every batched loss uses.
pub fn batch_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Direct Bregman evaluation kept separate from the row code so tests can
/// cross-check the two.
pub fn row_kl_direct(target_rates: &[f64], model: &ExitJump, source: usize) -> Result<f64> {
    let mut total = 0.0;
    for (j, &r) in target_rates.iter().enumerate() {
        if j != source {
            total += bregman_density(r, model.rate_to(j))?;
        }
    }
    Ok(total)
}

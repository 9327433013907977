use std::ops::AddAssign;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::divergence::{categorical_kl, poisson_kl, xlogx};
use crate::ctmc::{ExitJump, ReverseTarget, Schedule, ScheduleKind};
use crate::error::{domain, Error, Result};
use crate::model::{HeadGrad, RowGrad, TwoHead};

/// A loss split into its timing, direction and parameter-free parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub poisson: f64,
    pub direction: f64,
    pub constant: f64,
    pub total: f64,
    /// Destination whose model rate vanished although the target's did not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unsupported: Option<usize>,
}

impl LossBreakdown {
    pub fn infinite(index: usize) -> Self {
        Self {
            poisson: f64::INFINITY,
            direction: f64::INFINITY,
            constant: 0.0,
            total: f64::INFINITY,
            unsupported: Some(index),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.unsupported.is_none() && self.total.is_finite()
    }

    pub fn scaled(mut self, w: f64) -> Self {
        self.poisson *= w;
        self.direction *= w;
        self.constant *= w;
        self.total *= w;
        self
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.poisson += o.poisson;
        self.direction += o.direction;
        self.constant += o.constant;
        self.total += o.total;
        self.unsupported = self.unsupported.or(o.unsupported);
    }
}

/// Which per-sample objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `sum c_j - sum R a log(c / R) + sum R K(a)`; the training default.
    CondStable,
    /// `sum_j f(R_hat_j, c_j)`.
    Kl,
    /// `-sum R_hat_j log c_j - lambda_hat + lambda`.
    Conditional,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cond_stable" => Ok(Self::CondStable),
            "kl" => Ok(Self::Kl),
            "conditional" => Ok(Self::Conditional),
            other => Err(Error::Parse(format!("unknown objective `{other}`"))),
        }
    }
}

/// Conditional reverse quantities out of state `i` given `x0`, kept in the
/// factored form `R_hat(i, j | x0) = R_t(j, i) a_j` with
/// `a_j = q_{t|0}(j | x0) / q_{t|0}(i | x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalRow {
    pub state: usize,
    /// `R_t(j, i)`; zero at `j = i`.
    pub inflow: Vec<f64>,
    /// `a_j`; zero at `j = i`.
    pub ratio: Vec<f64>,
}

impl ConditionalRow {
    pub fn new(schedule: &Schedule, t: f64, x0: usize, i: usize) -> Result<Self> {
        let s = schedule.num_states();
        if x0 >= s || i >= s {
            return Err(domain("state out of range"));
        }
        let qi = schedule.kernel_prob(t, x0, i);
        if !(qi > 0.0) {
            return Err(Error::Unreachable { state: i, t, prob: qi });
        }
        let rho = schedule.rate_coefficient(t)?;
        let inflow_rate = rho * schedule.pi()[i];
        let mut inflow = vec![inflow_rate; s];
        inflow[i] = 0.0;
        let ratio = (0..s)
            .map(|j| if j == i { 0.0 } else { schedule.kernel_prob(t, x0, j) / qi })
            .collect();
        Ok(Self { state: i, inflow, ratio })
    }

    pub fn num_states(&self) -> usize {
        self.inflow.len()
    }

    pub fn rate_to(&self, j: usize) -> f64 {
        self.inflow[j] * self.ratio[j]
    }

    pub fn target(&self) -> ReverseTarget {
        let per_pair = (0..self.num_states()).map(|j| self.rate_to(j)).collect();
        ReverseTarget::from_per_pair(self.state, per_pair)
    }
}

/// `sum_j f(R_hat_j, c_j)` split as `KL^Poi(lambda_hat || lambda) + lambda_hat KL^Cat(r_hat || r)`.
pub fn decompose_row_kl(target: &ReverseTarget, model: &ExitJump) -> Result<LossBreakdown> {
    check_lengths(target.per_pair.len(), model)?;
    if target.exit_rate == 0.0 {
        return Ok(LossBreakdown {
            poisson: model.exit_rate,
            total: model.exit_rate,
            ..Default::default()
        });
    }
    if !(model.exit_rate > 0.0) {
        let j = (0..target.per_pair.len()).find(|&j| target.per_pair[j] > 0.0).unwrap_or(0);
        return Ok(LossBreakdown::infinite(j));
    }
    let mut total = 0.0;
    for (j, &rh) in target.per_pair.iter().enumerate() {
        if j == target.state {
            continue;
        }
        let c = model.rate_to(j);
        if c > 0.0 {
            total += super::bregman_density(rh, c)?;
        } else if rh > 0.0 {
            return Ok(LossBreakdown::infinite(j));
        }
    }
    let poisson = poisson_kl(target.exit_rate, model.exit_rate)?;
    let direction = match categorical_kl(&target.jump_dist, &model.jump_dist)? {
        super::Divergence::Finite(v) => target.exit_rate * v,
        super::Divergence::Infinite { index } => return Ok(LossBreakdown::infinite(index)),
    };
    Ok(LossBreakdown { poisson, direction, constant: 0.0, total, unsupported: None })
}

fn check_lengths(s: usize, model: &ExitJump) -> Result<()> {
    if model.jump_dist.len() != s {
        return Err(domain("model row and target row differ in length"));
    }
    Ok(())
}

/// Value, breakdown and gradient with respect to `(lambda, r)` of one row.
///
/// The three kinds share the minimizer and, after projection onto the
/// simplex, the gradient; only the parameter-free offset differs.
pub fn row_loss(kind: LossKind, row: &ConditionalRow, model: &ExitJump) -> Result<(LossBreakdown, RowGrad)> {
    let s = row.num_states();
    check_lengths(s, model)?;
    let i = row.state;
    let target = row.target();
    let lam_hat = target.exit_rate;
    let lam = model.exit_rate;
    let mut grad = RowGrad::zeros(s);

    if lam_hat == 0.0 {
        // Only the `+ lambda` term survives in every form.
        grad.d_exit = 1.0;
        let mut out = LossBreakdown { poisson: lam, total: lam, ..Default::default() };
        if kind == LossKind::CondStable {
            out.constant = stable_constant(row);
            out.total += out.constant;
        }
        if kind != LossKind::Conditional {
            grad.d_jump.iter_mut().enumerate().for_each(|(j, g)| if j != i { *g = lam });
        }
        return Ok((out, grad));
    }
    if !(lam > 0.0) {
        let j = (0..s).find(|&j| target.per_pair[j] > 0.0).unwrap_or(0);
        return Ok((LossBreakdown::infinite(j), grad));
    }
    for j in 0..s {
        if j != i && target.per_pair[j] > 0.0 && !(model.jump_dist[j] > 0.0) {
            return Ok((LossBreakdown::infinite(j), grad));
        }
    }

    grad.d_exit = 1.0 - lam_hat / lam;
    for j in 0..s {
        if j == i {
            continue;
        }
        let rh = target.per_pair[j];
        let r = model.jump_dist[j];
        let pull = if rh > 0.0 { rh / r } else { 0.0 };
        grad.d_jump[j] = match kind {
            LossKind::Conditional => -pull,
            LossKind::Kl | LossKind::CondStable => lam - pull,
        };
    }

    let out = match kind {
        LossKind::Kl => decompose_row_kl(&target, model)?,
        LossKind::Conditional => {
            let mut total = lam - lam_hat;
            let mut ce = 0.0;
            for j in 0..s {
                let rh = target.per_pair[j];
                if j != i && rh > 0.0 {
                    total -= rh * model.rate_to(j).ln();
                    ce -= rh * model.jump_dist[j].ln();
                }
            }
            LossBreakdown {
                poisson: poisson_kl(lam_hat, lam)?,
                direction: ce,
                constant: -xlogx(lam_hat),
                total,
                unsupported: None,
            }
        }
        LossKind::CondStable => {
            let mut total = 0.0;
            for j in 0..s {
                if j == i {
                    continue;
                }
                let c = model.rate_to(j);
                total += c;
                let (rin, a) = (row.inflow[j], row.ratio[j]);
                if rin > 0.0 && a > 0.0 {
                    total -= rin * a * (c / rin).ln();
                }
            }
            total += stable_constant(row);
            let poisson = poisson_kl(lam_hat, lam)?;
            let direction = match categorical_kl(&target.jump_dist, &model.jump_dist)? {
                super::Divergence::Finite(v) => lam_hat * v,
                super::Divergence::Infinite { index } => {
                    return Ok((LossBreakdown::infinite(index), RowGrad::zeros(s)))
                }
            };
            LossBreakdown {
                poisson,
                direction,
                constant: total - poisson - direction,
                total,
                unsupported: None,
            }
        }
    };
    Ok((out, grad))
}

/// `K(a) = a (log a - 1)`, `K(0) = 0`.
pub fn k_fn(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a.ln() - 1.0)
    }
}

fn stable_constant(row: &ConditionalRow) -> f64 {
    row.inflow
        .iter()
        .zip(&row.ratio)
        .enumerate()
        .filter(|&(j, (&rin, _))| j != row.state && rin > 0.0)
        .map(|(_, (&rin, &a))| rin * k_fn(a))
        .sum()
}

/// Per-position sum of `kind` over a sequence with factorized forward
/// noise, plus the gradient with respect to the model heads.
pub fn sequence_loss<M: TwoHead + ?Sized>(
    kind: LossKind,
    schedule: &Schedule,
    model: &M,
    x0: &[usize],
    t: f64,
    x_t: &[usize],
) -> Result<(LossBreakdown, HeadGrad)> {
    if x0.len() != x_t.len() {
        return Err(domain("x0 and x_t differ in length"));
    }
    let heads = model.forward(x_t, t)?;
    let mut total = LossBreakdown::default();
    let mut per_position = Vec::with_capacity(x_t.len());
    for ((&a, &b), head) in x0.iter().zip(x_t).zip(&heads.per_position) {
        let row = ConditionalRow::new(schedule, t, a, b)?;
        let (l, g) = row_loss(kind, &row, head)?;
        total += l;
        per_position.push(g);
    }
    Ok((total, HeadGrad { per_position }))
}

fn single<M: TwoHead + ?Sized>(kind: LossKind, schedule: &Schedule, model: &M, x0: usize, t: f64, x_t: usize) -> Result<LossBreakdown> {
    Ok(sequence_loss(kind, schedule, model, &[x0], t, &[x_t])?.0)
}

/// `-sum_j R_hat_{t|0}(x_t, j) log(lambda r_j) - lambda_hat + lambda`.
pub fn loss_conditional<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, x0: usize, t: f64, x_t: usize) -> Result<LossBreakdown> {
    single(LossKind::Conditional, schedule, model, x0, t, x_t)
}

/// `sum_j f(R_hat_{t|0}(x_t, j), R^theta_t(x_t, j))`.
pub fn loss_kl<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, x0: usize, t: f64, x_t: usize) -> Result<LossBreakdown> {
    single(LossKind::Kl, schedule, model, x0, t, x_t)
}

/// The cancellation-free form of [`loss_kl`].
pub fn loss_cond_stable<M: TwoHead + ?Sized>(schedule: &Schedule, model: &M, x0: usize, t: f64, x_t: usize) -> Result<LossBreakdown> {
    single(LossKind::CondStable, schedule, model, x0, t, x_t)
}

/// Masked cross-entropy `(alpha'_t / (1 - alpha_t)) log x_theta[x0] 1{x_t = m}`.
///
/// `x_theta` ranges over the non-mask states. A zero at the true token gives `+inf`.
pub fn mdlm_loss(schedule: &Schedule, t: f64, x0: usize, x_t: usize, x_theta: &[f64]) -> Result<f64> {
    if schedule.kind() != ScheduleKind::Masked {
        return Err(Error::UnsupportedSchedule("mdlm_loss needs a masked schedule".into()));
    }
    let m = schedule.num_states() - 1;
    if x0 >= m || x_t > m || x_theta.len() != m {
        return Err(domain("mdlm_loss: states or distribution out of range"));
    }
    if x_t != m {
        return Ok(0.0);
    }
    let p = x_theta[x0];
    if !(p > 0.0) {
        return Ok(f64::INFINITY);
    }
    let beta = schedule.beta(t);
    if !(beta > 0.0) {
        return Err(domain(format!("mdlm weight is unbounded at t = {t}")));
    }
    Ok(schedule.alpha_prime(t) / beta * p.ln())
}

use serde::{Deserialize, Serialize};

use crate::ctmc::{ExitJump, Schedule, ScheduleKind};
use crate::error::{domain, Error, Result};
use crate::model::TwoHead;
use crate::rng::{categorical, SimRng};

/// Model-implied noised distribution and the clean-token distribution
/// recovered from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredClean {
    pub q_tilde: Vec<f64>,
    pub p0_hat: Vec<f64>,
}

/// Inverts the reverse-rate factorization of a uniform schedule at state `i`:
/// `q(i) = 1 / (1 + S alpha lambda / (-alpha'))`, `q(j) = (1 - q(i)) r(j)`,
/// then `p0 = Normalize([(q - beta pi) / alpha]_+)`.
///
/// For `alpha_t = 1 - t` the factor `-alpha'` is one.
pub fn recover_clean(head: &ExitJump, schedule: &Schedule, t: f64, i: usize) -> Result<RecoveredClean> {
    if schedule.kind() != ScheduleKind::Uniform {
        return Err(Error::UnsupportedSchedule("clean-token recovery needs uniform noise".into()));
    }
    let s = schedule.num_states();
    if i >= s || head.jump_dist.len() != s {
        return Err(domain("state or head out of range"));
    }
    let alpha = schedule.alpha(t);
    let slope = -schedule.alpha_prime(t);
    if !(alpha > 0.0) || !(slope > 0.0) {
        return Err(domain(format!("recovery needs alpha_t > 0 and alpha'_t < 0 at t = {t}")));
    }
    let qi = 1.0 / (1.0 + s as f64 * alpha * head.exit_rate / slope);
    let q_tilde: Vec<f64> = (0..s)
        .map(|j| if j == i { qi } else { (1.0 - qi) * head.jump_dist[j] })
        .collect();
    let floor = schedule.beta(t) / s as f64;
    let clipped: Vec<f64> = q_tilde.iter().map(|&q| ((q - floor) / alpha).max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateRecovery(format!("every entry clipped at state {i}, t = {t}")));
    }
    let p0_hat = clipped.iter().map(|p| p / total).collect();
    Ok(RecoveredClean { q_tilde, p0_hat })
}

/// `p_j^{1/tau} / sum_a p_a^{1/tau}`, computed in log space.
pub fn temper(p: &[f64], tau: f64) -> Vec<f64> {
    let logs: Vec<f64> = p
        .iter()
        .map(|&x| if x > 0.0 { x.ln() / tau } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectConfig {
    pub temperature: f64,
    pub max_updates: usize,
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectOutcome {
    pub sequence: Vec<usize>,
    /// `(position, old, new)` for each edit, in order.
    pub edits: Vec<(usize, usize, usize)>,
    /// Positions skipped because their recovery degenerated.
    pub diagnostics: Vec<String>,
}

/// Up to `max_updates` single-position edits. Each iteration proposes a
/// clean token per position from the tempered recovered distribution and
/// applies the disagreeing proposal with the highest recovered probability.
pub fn self_correct<M: TwoHead + ?Sized>(
    model: &M,
    schedule: &Schedule,
    x_t: &[usize],
    config: &SelfCorrectConfig,
    rng: &mut SimRng,
) -> Result<SelfCorrectOutcome> {
    if !(config.temperature > 0.0) || config.max_updates == 0 {
        return Err(domain("self-correction needs temperature > 0 and max_updates >= 1"));
    }
    let t = config.noise_level;
    let mut x = x_t.to_vec();
    let mut edits = Vec::new();
    let mut diagnostics = Vec::new();
    for _ in 0..config.max_updates {
        let heads = model.forward(&x, t)?;
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, head) in heads.per_position.iter().enumerate() {
            let rec = match recover_clean(head, schedule, t, x[l]) {
                Ok(r) => r,
                Err(Error::DegenerateRecovery(msg)) => {
                    diagnostics.push(format!("position {l}: {msg}"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let proposal = categorical(rng, &temper(&rec.p0_hat, config.temperature))
                .expect("recovered distributions are normalized");
            if proposal != x[l] {
                let conf = rec.p0_hat[proposal];
                if best.is_none_or(|(_, _, c)| conf > c) {
                    best = Some((l, proposal, conf));
                }
            }
        }
        let Some((l, new, _)) = best else { break };
        edits.push((l, x[l], new));
        x[l] = new;
    }
    Ok(SelfCorrectOutcome { sequence: x, edits, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::AlphaFamily;

    #[test]
    fn two_state_round_trip() {
        // alpha = 0.5 at t = 0.5 for the linear family with T = 1.
        let s = Schedule::uniform(2, AlphaFamily::Linear, 1.0).unwrap();
        let head = ExitJump { exit_rate: 1.0 / 3.0, jump_dist: vec![0.0, 1.0] };
        let rec = recover_clean(&head, &s, 0.5, 0).unwrap();
        assert!((rec.q_tilde[0] - 0.75).abs() < 1e-12);
        assert!((rec.p0_hat[0] - 1.0).abs() < 1e-10 && rec.p0_hat[1].abs() < 1e-10);
    }

    #[test]
    fn prior_recovers_to_uniform() {
        let s = Schedule::uniform(4, AlphaFamily::Linear, 1.0).unwrap();
        // q_tilde = pi: q(i) = 1/4 needs S alpha lambda = 3.
        let t = 0.4;
        let lam = 3.0 / (4.0 * s.alpha(t));
        let head = ExitJump { exit_rate: lam, jump_dist: vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0] };
        let rec = recover_clean(&head, &s, t, 1).unwrap();
        for &p in &rec.q_tilde {
            assert!((p - 0.25).abs() < 1e-12);
        }
        for &p in &rec.p0_hat {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn temper_sharpens() {
        let p = temper(&[0.2, 0.8, 0.0], 0.5);
        assert!((p[1] / p[0] - 16.0).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn masked_schedule_is_unsupported() {
        let s = Schedule::masked(3, AlphaFamily::Linear, 1.0).unwrap();
        let head = ExitJump { exit_rate: 1.0, jump_dist: vec![0.5, 0.5, 0.0] };
        assert!(matches!(recover_clean(&head, &s, 0.5, 2), Err(Error::UnsupportedSchedule(_))));
    }
}

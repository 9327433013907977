//! True and conditional reverse-time rates.

use crate::ctmc::{ExitJump, RateFn, Schedule};
use crate::error::{domain, Error, Result};

/// Reverse rates out of one state: per-destination rates plus their
/// exit-rate / jump-distribution split.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseTarget {
    pub state: usize,
    pub exit_rate: f64,
    pub jump_dist: Vec<f64>,
    /// Rate to each destination; zero at `state`.
    pub per_pair: Vec<f64>,
}

impl ReverseTarget {
    pub fn from_per_pair(state: usize, mut per_pair: Vec<f64>) -> Self {
        per_pair[state] = 0.0;
        let split = ExitJump::from_row(state, &per_pair);
        Self {
            state,
            exit_rate: split.exit_rate,
            jump_dist: split.jump_dist,
            per_pair,
        }
    }

    pub fn exit_jump(&self) -> ExitJump {
        ExitJump {
            exit_rate: self.exit_rate,
            jump_dist: self.jump_dist.clone(),
        }
    }
}

/// `R_t(j, i) q(j) / q(i)` for all `j != i`, given any distribution `q`
/// with `q(i) > 0` (a conditional `q_{t|0}` or a marginal `q_t`).
fn reverse_from_distribution(schedule: &Schedule, t: f64, q: &[f64], i: usize) -> Result<ReverseTarget> {
    if i >= schedule.num_states() {
        return Err(domain(format!("state {i} out of range")));
    }
    let qi = q[i];
    if !(qi > 0.0) {
        return Err(Error::Unreachable { state: i, t, prob: qi });
    }
    let rho = schedule.rate_coefficient(t)?;
    // R_t(j, i) = rho * pi_i for every j != i.
    let inflow = rho * schedule.pi()[i];
    let per_pair = q
        .iter()
        .enumerate()
        .map(|(j, &qj)| if j == i { 0.0 } else { inflow * qj / qi })
        .collect();
    Ok(ReverseTarget::from_per_pair(i, per_pair))
}

/// Reverse rates conditioned on the clean state `x0`:
/// `R_t(j, i) q_{t|0}(j | x0) / q_{t|0}(i | x0)`.
pub fn conditional_reverse(schedule: &Schedule, t: f64, x0: usize, i: usize) -> Result<ReverseTarget> {
    let q = schedule.forward_kernel(t, x0)?;
    reverse_from_distribution(schedule, t, &q, i)
}

/// Time reversal of the forward process under `p_data`:
/// `R_t(j, i) q_t(j) / q_t(i)`.
pub fn marginal_reverse(schedule: &Schedule, p_data: &[f64], t: f64, i: usize) -> Result<ReverseTarget> {
    let q = schedule.marginal(t, p_data)?;
    reverse_from_distribution(schedule, t, &q, i)
}

/// Exact reverse generator of the forward process started from `p_data`,
/// indexed by forward time.
#[derive(Debug, Clone)]
pub struct MarginalReverseRate<'a> {
    schedule: &'a Schedule,
    p_data: Vec<f64>,
}

impl<'a> MarginalReverseRate<'a> {
    pub fn new(schedule: &'a Schedule, p_data: &[f64]) -> Result<Self> {
        if p_data.len() != schedule.num_states() {
            return Err(domain("p_data length must equal num_states"));
        }
        Ok(Self { schedule, p_data: p_data.to_vec() })
    }
}

impl RateFn for MarginalReverseRate<'_> {
    fn num_states(&self) -> usize {
        self.schedule.num_states()
    }
    fn rate(&self, t: f64, i: usize, j: usize) -> Result<f64> {
        Ok(marginal_reverse(self.schedule, &self.p_data, t, i)?.per_pair[j])
    }
    fn exit_jump(&self, t: f64, i: usize) -> Result<ExitJump> {
        Ok(marginal_reverse(self.schedule, &self.p_data, t, i)?.exit_jump())
    }

    /// With `lambda_t(i) = rho_t pi_i (1 - q_t(i)) / q_t(i)` and `rho dt = -d alpha / alpha`:
    /// `log(alpha_a q_b / (alpha_b q_a)) - pi_i log(alpha_a / alpha_b)`.
    fn cumulative_exit(&self, i: usize, a: f64, b: f64) -> Option<Result<f64>> {
        let s = self.schedule;
        let pi = s.pi()[i];
        let run = || -> Result<f64> {
            s.rate_coefficient(a)?;
            s.rate_coefficient(b)?;
            if pi == 0.0 {
                return Ok(0.0);
            }
            let q = |t: f64| s.alpha(t) * self.p_data[i] + s.beta(t) * pi;
            let (qa, qb) = (q(a), q(b));
            for (t, qt) in [(a, qa), (b, qb)] {
                if !(qt > 0.0) {
                    return Err(Error::Unreachable { state: i, t, prob: qt });
                }
            }
            let log_alpha = (s.alpha(a) / s.alpha(b)).ln();
            Ok(log_alpha + (qb / qa).ln() - pi * log_alpha)
        };
        Some(run())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{rate_from_schedule, AlphaFamily};

    fn check_invariants(target: &ReverseTarget) {
        let total: f64 = target.per_pair.iter().sum();
        assert!((total - target.exit_rate).abs() < 1e-10);
        for (j, &r) in target.per_pair.iter().enumerate() {
            assert!((target.jump_dist[j] * target.exit_rate - r).abs() < 1e-10);
        }
        assert_eq!(target.per_pair[target.state], 0.0);
    }

    #[test]
    fn two_state_conditional_example() {
        // alpha = 0.5 at t = 0.5; q(.|0) = (0.75, 0.25); R_t(0, 1) = pi_1 / (1 - t) = 1.
        let s = Schedule::uniform(2, AlphaFamily::Linear, 1.0).unwrap();
        let target = conditional_reverse(&s, 0.5, 0, 1).unwrap();
        let r01 = rate_from_schedule(&s, 0.5).unwrap().get(0, 1);
        assert!((r01 - 1.0).abs() < 1e-12);
        assert!((target.per_pair[0] - 3.0 * r01).abs() < 1e-12);
        assert!((target.exit_rate - 3.0).abs() < 1e-12);
        assert_eq!(target.jump_dist, vec![1.0, 0.0]);
        check_invariants(&target);
    }

    #[test]
    fn conditional_equals_marginal_under_delta_data() {
        for s in [
            Schedule::uniform(5, AlphaFamily::Linear, 1.0).unwrap(),
            Schedule::uniform(3, AlphaFamily::Cosine, 2.0).unwrap(),
            Schedule::masked(4, AlphaFamily::Linear, 1.0).unwrap(),
        ] {
            let n = s.num_states();
            for x0 in 0..n {
                let mut delta = vec![0.0; n];
                delta[x0] = 1.0;
                for &frac in &[0.1, 0.4, 0.9] {
                    let t = frac * s.horizon();
                    for i in 0..n {
                        let c = conditional_reverse(&s, t, x0, i);
                        let m = marginal_reverse(&s, &delta, t, i);
                        match (c, m) {
                            (Ok(c), Ok(m)) => {
                                check_invariants(&c);
                                for j in 0..n {
                                    assert!((c.per_pair[j] - m.per_pair[j]).abs() < 1e-12);
                                }
                            }
                            (Err(a), Err(b)) => assert_eq!(a, b),
                            other => panic!("mismatch {other:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stationary_data_reverse_matches_forward_exit() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let p = vec![1.0 / 3.0; 3];
        for &t in &[0.05, 0.5, 0.95] {
            let fwd = rate_from_schedule(&s, t).unwrap();
            for i in 0..3 {
                let m = marginal_reverse(&s, &p, t, i).unwrap();
                assert!((m.exit_rate + fwd.get(i, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_exit_is_posterior_average_of_conditional_exits() {
        let s = Schedule::uniform(4, AlphaFamily::Linear, 1.0).unwrap();
        let p = vec![0.5, 0.2, 0.3, 0.0];
        for &t in &[0.2, 0.6] {
            let q = s.marginal(t, &p).unwrap();
            for i in 0..4 {
                let m = marginal_reverse(&s, &p, t, i).unwrap();
                let mut avg = vec![0.0; 4];
                for x0 in 0..4 {
                    let post = p[x0] * s.kernel_prob(t, x0, i) / q[i];
                    if post > 0.0 {
                        let c = conditional_reverse(&s, t, x0, i).unwrap();
                        for j in 0..4 {
                            avg[j] += post * c.per_pair[j];
                        }
                    }
                }
                let avg_exit: f64 = avg.iter().sum();
                assert!((avg_exit - m.exit_rate).abs() < 1e-12);
                for j in 0..4 {
                    assert!((avg[j] - m.per_pair[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cumulative_exit_matches_quadrature() {
        for s in [
            Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap(),
            Schedule::uniform(4, AlphaFamily::Cosine, 2.0).unwrap(),
            Schedule::masked(3, AlphaFamily::Cosine, 1.0).unwrap(),
        ] {
            let n = s.num_states();
            let mut p = vec![0.0; n];
            p[0] = 0.7;
            p[1] = 0.3;
            let rev = MarginalReverseRate::new(&s, &p).unwrap();
            let (a, b) = (0.01 * s.horizon(), 0.9 * s.horizon());
            for i in 0..n {
                let closed = rev.cumulative_exit(i, a, b).unwrap().unwrap();
                let numeric = crate::quad::adaptive(|t| rev.exit_rate(t, i), a, b, 1e-12).unwrap();
                assert!((closed - numeric).abs() <= 1e-10 * numeric.abs().max(1.0), "{closed} vs {numeric}");
            }
            let fwd = crate::ctmc::ForwardRate::new(&s);
            for i in 0..n {
                let closed = fwd.cumulative_exit(i, a, b).unwrap().unwrap();
                let numeric = crate::quad::adaptive(|t| fwd.exit_rate(t, i), a, b, 1e-12).unwrap();
                assert!((closed - numeric).abs() <= 1e-10 * numeric.abs().max(1.0));
            }
        }
    }

    #[test]
    fn masked_conditional_structure() {
        let s = Schedule::masked(4, AlphaFamily::Linear, 1.0).unwrap();
        let m = 3;
        // gamma_t = -alpha'/(1 - alpha) = 1/t
        let target = conditional_reverse(&s, 0.25, 1, m).unwrap();
        assert!((target.exit_rate - 4.0).abs() < 1e-12);
        assert_eq!(target.jump_dist, vec![0.0, 1.0, 0.0, 0.0]);
        // the clean token itself never moves
        let stay = conditional_reverse(&s, 0.25, 1, 1).unwrap();
        assert_eq!(stay.exit_rate, 0.0);
        assert!(matches!(
            conditional_reverse(&s, 0.25, 1, 2),
            Err(Error::Unreachable { state: 2, .. })
        ));
    }

    #[test]
    fn uniform_exit_vanishes_at_clean_state_as_t_goes_to_zero() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for &t in &[1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let e = conditional_reverse(&s, t, 0, 0).unwrap().exit_rate;
            assert!(e < prev);
            prev = e;
        }
        assert!(prev < 1e-4);
    }
}

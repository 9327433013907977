use super::{check_sequence, HeadOutput, TwoHead};
use crate::ctmc::{ExitJump, Schedule, ScheduleKind};
use crate::error::{domain, Error, Result};

/// Views a clean-token predictor `x_theta(x_t, t)` as a two-head model on a
/// masked schedule: a masked position leaves at rate `-alpha'_t / (1 - alpha_t)`
/// towards `x_theta`, an unmasked position never moves.
///
/// The predictor returns, per position, a distribution over the `S - 1`
/// non-mask states.
pub struct MaskedAdapter<'a, F> {
    schedule: &'a Schedule,
    predictor: F,
    seq_len: usize,
}

impl<'a, F> MaskedAdapter<'a, F>
where
    F: Fn(&[usize], f64) -> Result<Vec<Vec<f64>>> + Sync,
{
    pub fn new(schedule: &'a Schedule, seq_len: usize, predictor: F) -> Result<Self> {
        if schedule.kind() != ScheduleKind::Masked {
            return Err(Error::UnsupportedSchedule("the masked adapter needs a masked schedule".into()));
        }
        Ok(Self { schedule, predictor, seq_len })
    }

    /// `-alpha'_t / (1 - alpha_t)`, the unmasking rate of a masked token.
    pub fn unmask_rate(&self, t: f64) -> Result<f64> {
        let beta = self.schedule.beta(t);
        if !(beta > 0.0) {
            return Err(domain(format!("unmasking rate is unbounded at t = {t}")));
        }
        Ok(-self.schedule.alpha_prime(t) / beta)
    }
}

impl<F> TwoHead for MaskedAdapter<'_, F>
where
    F: Fn(&[usize], f64) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn num_states(&self) -> usize {
        self.schedule.num_states()
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput> {
        let s = self.schedule.num_states();
        check_sequence(x, self.seq_len, s)?;
        let m = s - 1;
        if !x.contains(&m) {
            return Ok(HeadOutput {
                per_position: vec![ExitJump::absorbing(s); x.len()],
            });
        }
        let rate = self.unmask_rate(t)?;
        let preds = (self.predictor)(x, t)?;
        if preds.len() != x.len() {
            return Err(domain("predictor must return one distribution per position"));
        }
        let per_position = x
            .iter()
            .zip(preds)
            .map(|(&xi, p)| {
                if xi != m {
                    return Ok(ExitJump::absorbing(s));
                }
                if p.len() != m {
                    return Err(domain(format!("predictor distribution must have {m} entries")));
                }
                let mut jump_dist = p;
                jump_dist.push(0.0);
                Ok(ExitJump { exit_rate: rate, jump_dist })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadOutput { per_position })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::AlphaFamily;

    fn fixed(_: &[usize], _: f64) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.7, 0.3]])
    }

    #[test]
    fn mask_rate_example() {
        // Linear alpha with T = 1: alpha = 0.8 at t = 0.2, alpha' = -1.
        let s = Schedule::masked(3, AlphaFamily::Linear, 1.0).unwrap();
        let m = MaskedAdapter::new(&s, 1, fixed).unwrap();
        let head = m.head(0.2, 2).unwrap();
        assert!((head.exit_rate - 5.0).abs() < 1e-12);
        assert_eq!(head.jump_dist, vec![0.7, 0.3, 0.0]);
        assert!(m.head(0.2, 0).unwrap().is_absorbing());
    }

    #[test]
    fn uniform_schedule_is_rejected() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        assert!(MaskedAdapter::new(&s, 1, fixed).is_err());
    }
}

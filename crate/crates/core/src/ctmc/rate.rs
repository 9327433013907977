//! Rate matrices and the exit-rate / jump-distribution split
//! `R_t(i, j) = lambda_t(i) r_t(j | i)`.

use crate::ctmc::Schedule;
use crate::error::{domain, Result};

/// A time-dependent CTMC generator, queried one entry at a time.
///
/// `rate(t, i, j)` is only meaningful for `i != j`; the diagonal is implied
/// by zero row sums.
pub trait RateFn: Sync {
    fn num_states(&self) -> usize;

    fn rate(&self, t: f64, i: usize, j: usize) -> Result<f64>;

    fn exit_rate(&self, t: f64, i: usize) -> Result<f64> {
        let mut total = 0.0;
        for j in 0..self.num_states() {
            if j != i {
                total += self.rate(t, i, j)?;
            }
        }
        Ok(total)
    }

    fn exit_jump(&self, t: f64, i: usize) -> Result<ExitJump> {
        let row = (0..self.num_states())
            .map(|j| if j == i { Ok(0.0) } else { self.rate(t, i, j) })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExitJump::from_row(i, &row))
    }

    /// Times at which rates may jump discontinuously.
    fn time_breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// `int_a^b lambda_t(i) dt` in closed form, when one is known.
    fn cumulative_exit(&self, _i: usize, _a: f64, _b: f64) -> Option<Result<f64>> {
        None
    }
}

impl<R: RateFn + ?Sized> RateFn for &R {
    fn num_states(&self) -> usize {
        (**self).num_states()
    }
    fn rate(&self, t: f64, i: usize, j: usize) -> Result<f64> {
        (**self).rate(t, i, j)
    }
    fn exit_rate(&self, t: f64, i: usize) -> Result<f64> {
        (**self).exit_rate(t, i)
    }
    fn exit_jump(&self, t: f64, i: usize) -> Result<ExitJump> {
        (**self).exit_jump(t, i)
    }
    fn time_breakpoints(&self) -> Vec<f64> {
        (**self).time_breakpoints()
    }
    fn cumulative_exit(&self, i: usize, a: f64, b: f64) -> Option<Result<f64>> {
        (**self).cumulative_exit(i, a, b)
    }
}

/// Exit rate `lambda >= 0` and jump distribution with zero self-mass.
///
/// `exit_rate == 0` is the absorbing sentinel: `jump_dist` is then all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitJump {
    pub exit_rate: f64,
    pub jump_dist: Vec<f64>,
}

impl ExitJump {
    /// Builds from a row of off-diagonal rates; the entry at `source` is ignored.
    pub fn from_row(source: usize, row: &[f64]) -> Self {
        let exit_rate: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != source)
            .map(|(_, &r)| r)
            .sum();
        let jump_dist = if exit_rate > 0.0 {
            row.iter()
                .enumerate()
                .map(|(j, &r)| if j == source { 0.0 } else { r / exit_rate })
                .collect()
        } else {
            vec![0.0; row.len()]
        };
        Self { exit_rate, jump_dist }
    }

    pub fn absorbing(num_states: usize) -> Self {
        Self {
            exit_rate: 0.0,
            jump_dist: vec![0.0; num_states],
        }
    }

    pub fn is_absorbing(&self) -> bool {
        self.exit_rate == 0.0
    }

    /// `lambda r(j)`, the off-diagonal rate this pair encodes.
    pub fn rate_to(&self, j: usize) -> f64 {
        self.exit_rate * self.jump_dist[j]
    }

    pub fn num_states(&self) -> usize {
        self.jump_dist.len()
    }
}

/// Dense snapshot of a generator at a fixed time, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRate {
    num_states: usize,
    entries: Vec<f64>,
}

impl DenseRate {
    /// Takes off-diagonal entries row-major; the diagonal is recomputed.
    pub fn from_off_diagonal(num_states: usize, mut entries: Vec<f64>) -> Result<Self> {
        if entries.len() != num_states * num_states {
            return Err(domain("rate matrix must be S x S"));
        }
        for i in 0..num_states {
            let mut total = 0.0;
            for j in 0..num_states {
                if i != j {
                    let r = entries[i * num_states + j];
                    if !(r >= 0.0) || !r.is_finite() {
                        return Err(domain(format!("rate ({i},{j}) = {r} is not a finite nonnegative rate")));
                    }
                    total += r;
                }
            }
            entries[i * num_states + i] = -total;
        }
        Ok(Self { num_states, entries })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.num_states + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.num_states..(i + 1) * self.num_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
}

impl RateFn for DenseRate {
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn rate(&self, _t: f64, i: usize, j: usize) -> Result<f64> {
        Ok(self.get(i, j))
    }
}

/// Forward generator of a schedule: `R_t(i, j) = (-alpha'_t / alpha_t) pi_j`.
///
/// For the masked kind this is `-alpha'/alpha` into the mask and zero
/// elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct ForwardRate<'a> {
    schedule: &'a Schedule,
}

impl<'a> ForwardRate<'a> {
    pub fn new(schedule: &'a Schedule) -> Self {
        Self { schedule }
    }

    pub fn schedule(&self) -> &'a Schedule {
        self.schedule
    }
}

impl RateFn for ForwardRate<'_> {
    fn num_states(&self) -> usize {
        self.schedule.num_states()
    }

    fn rate(&self, t: f64, i: usize, j: usize) -> Result<f64> {
        let rho = self.schedule.rate_coefficient(t)?;
        Ok(if i == j { 0.0 } else { rho * self.schedule.pi()[j] })
    }

    fn exit_rate(&self, t: f64, i: usize) -> Result<f64> {
        let rho = self.schedule.rate_coefficient(t)?;
        Ok(rho * (1.0 - self.schedule.pi()[i]))
    }

    /// `(1 - pi_i) log(alpha_a / alpha_b)`.
    fn cumulative_exit(&self, i: usize, a: f64, b: f64) -> Option<Result<f64>> {
        let s = self.schedule;
        Some(s.rate_coefficient(a).and(s.rate_coefficient(b)).map(|_| (1.0 - s.pi()[i]) * (s.alpha(a) / s.alpha(b)).ln()))
    }
}

/// Materialize the forward generator of `schedule` at time `t`.
pub fn rate_from_schedule(schedule: &Schedule, t: f64) -> Result<DenseRate> {
    let s = schedule.num_states();
    let rho = schedule.rate_coefficient(t)?;
    let entries = (0..s * s)
        .map(|k| if k / s == k % s { 0.0 } else { rho * schedule.pi()[k % s] })
        .collect();
    DenseRate::from_off_diagonal(s, entries)
}

/// Split row `i` of `rate` at time `t` into exit rate and jump distribution.
pub fn decompose_rate(rate: &dyn RateFn, t: f64, i: usize) -> Result<ExitJump> {
    if i >= rate.num_states() {
        return Err(domain(format!("state {i} out of range")));
    }
    rate.exit_jump(t, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::AlphaFamily;

    /// `R = P_t^{-1} dP_t/dt` by Gaussian elimination on the dense kernel.
    fn numerical_generator(schedule: &Schedule, t: f64) -> Vec<f64> {
        let s = schedule.num_states();
        let h = 1e-6;
        let kernel = |t: f64| -> Vec<f64> {
            let mut m = vec![0.0; s * s];
            for i in 0..s {
                for j in 0..s {
                    m[i * s + j] = schedule.kernel_prob(t, i, j);
                }
            }
            m
        };
        let p = kernel(t);
        let (pp, pm) = (kernel(t + h), kernel(t - h));
        let dp: Vec<f64> = pp.iter().zip(&pm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        // Solve P X = dP column by column with partial pivoting.
        let mut a = p.clone();
        let mut b = dp.clone();
        for col in 0..s {
            let piv = (col..s)
                .max_by(|&x, &y| a[x * s + col].abs().total_cmp(&a[y * s + col].abs()))
                .unwrap();
            for k in 0..s {
                a.swap(col * s + k, piv * s + k);
                b.swap(col * s + k, piv * s + k);
            }
            for row in 0..s {
                if row != col {
                    let f = a[row * s + col] / a[col * s + col];
                    for k in 0..s {
                        a[row * s + k] -= f * a[col * s + k];
                        b[row * s + k] -= f * b[col * s + k];
                    }
                }
            }
        }
        (0..s * s).map(|k| b[k] / a[(k / s) * s + k / s]).collect()
    }

    #[test]
    fn uniform_rate_example() {
        let s = Schedule::uniform(4, AlphaFamily::Linear, 1.0).unwrap();
        let r = rate_from_schedule(&s, 0.5).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((r.get(i, j) - 0.5).abs() < 1e-12);
                }
            }
            assert!(r.row(i).iter().sum::<f64>().abs() < 1e-12);
            let ej = decompose_rate(&r, 0.5, i).unwrap();
            assert!((ej.exit_rate - 1.5).abs() < 1e-12);
            for j in 0..4 {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((ej.jump_dist[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rate_matches_numerical_inverse() {
        for fam in [AlphaFamily::Linear, AlphaFamily::Cosine] {
            let s = Schedule::uniform(4, fam, 1.0).unwrap();
            for &t in &[0.1, 0.5, 0.8] {
                let num = numerical_generator(&s, t);
                let r = rate_from_schedule(&s, t).unwrap();
                for (k, &n) in num.iter().enumerate() {
                    assert!((n - r.as_slice()[k]).abs() < 1e-6, "t={t} k={k}: {n} vs {}", r.as_slice()[k]);
                }
            }
        }
    }

    #[test]
    fn masked_rate_example() {
        // alpha = 0.8, alpha' = -1 for linear T = 1 at t = 0.2
        let s = Schedule::masked(4, AlphaFamily::Linear, 1.0).unwrap();
        let r = rate_from_schedule(&s, 0.2).unwrap();
        let m = 3;
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let want = if j == m { 1.25 } else { 0.0 };
                assert!((r.get(i, j) - want).abs() < 1e-12);
            }
        }
        let absorbed = decompose_rate(&r, 0.2, m).unwrap();
        assert!(absorbed.is_absorbing());
        assert!(absorbed.jump_dist.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn forward_rate_agrees_with_dense_snapshot() {
        let s = Schedule::uniform(5, AlphaFamily::Cosine, 2.0).unwrap();
        let fwd = ForwardRate::new(&s);
        let dense = rate_from_schedule(&s, 0.7).unwrap();
        for i in 0..5 {
            assert!((fwd.exit_rate(0.7, i).unwrap() + dense.get(i, i)).abs() < 1e-12);
            for j in 0..5 {
                if i != j {
                    assert_eq!(fwd.rate(0.7, i, j).unwrap(), dense.get(i, j));
                }
            }
        }
    }

    #[test]
    fn decompose_reconstructs_rates() {
        let entries = vec![0.0, 0.3, 1.2, 0.0, 0.0, 2.0, 0.5, 0.0, 0.0];
        let r = DenseRate::from_off_diagonal(3, entries).unwrap();
        for i in 0..3 {
            let ej = decompose_rate(&r, 0.0, i).unwrap();
            assert_eq!(ej.jump_dist[i], 0.0);
            assert!((ej.jump_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..3 {
                if j != i {
                    assert!((ej.rate_to(j) - r.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn negative_rates_rejected() {
        assert!(DenseRate::from_off_diagonal(2, vec![0.0, -1.0, 1.0, 0.0]).is_err());
    }
}

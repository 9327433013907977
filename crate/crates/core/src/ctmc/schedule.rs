//! Noise schedules and the closed-form forward kernel
//! `q_{t|0}(. | x0) = alpha_t e_{x0} + beta_t pi`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Largest state space accepted; keeps the dense oracles tractable.
pub const MAX_STATES: usize = 4096;

/// Default clamp as a fraction of the horizon.
pub const DEFAULT_EPS_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Reference distribution uniform over all states.
    Uniform,
    /// Absorbing process; the last state is the mask token.
    Masked,
}

/// Shape of `alpha_t` on `[0, T]`. Both satisfy `alpha_0 = 1`, `alpha_T = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaFamily {
    /// `alpha_t = 1 - t/T`
    Linear,
    /// `alpha_t = cos(pi t / 2T)`
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "masked" => Ok(Self::Masked),
            other => Err(Error::Parse(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::str::FromStr for AlphaFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Parse(format!("unknown alpha family `{other}`"))),
        }
    }
}

/// A forward noising process over `num_states` states and horizon `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    family: AlphaFamily,
    num_states: usize,
    horizon: f64,
    eps: f64,
    pi: Vec<f64>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, family: AlphaFamily, num_states: usize, horizon: f64) -> Result<Self> {
        if !(2..=MAX_STATES).contains(&num_states) {
            return Err(domain(format!("num_states must lie in [2, {MAX_STATES}], got {num_states}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(domain(format!("horizon must be positive and finite, got {horizon}")));
        }
        let pi = match kind {
            ScheduleKind::Uniform => vec![1.0 / num_states as f64; num_states],
            ScheduleKind::Masked => {
                let mut v = vec![0.0; num_states];
                v[num_states - 1] = 1.0;
                v
            }
        };
        Ok(Self {
            kind,
            family,
            num_states,
            horizon,
            eps: DEFAULT_EPS_FRACTION * horizon,
            pi,
        })
    }

    pub fn uniform(num_states: usize, family: AlphaFamily, horizon: f64) -> Result<Self> {
        Self::new(ScheduleKind::Uniform, family, num_states, horizon)
    }

    /// Masked process over `vocab + 1` states; the mask is state `vocab`.
    pub fn masked(num_states: usize, family: AlphaFamily, horizon: f64) -> Result<Self> {
        Self::new(ScheduleKind::Masked, family, num_states, horizon)
    }

    /// Override the time clamp `eps_T`; must satisfy `0 <= eps < T/2`.
    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps < 0.5 * self.horizon) {
            return Err(domain(format!("eps must lie in [0, T/2), got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn family(&self) -> AlphaFamily {
        self.family
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Smallest time at which learned quantities are evaluated.
    pub fn lower_time(&self) -> f64 {
        self.eps
    }

    /// Largest time at which rates are evaluated, `T - eps_T`.
    pub fn upper_time(&self) -> f64 {
        self.horizon - self.eps
    }

    /// Clamp `t` into `[eps_T, T - eps_T]`.
    pub fn clamp_time(&self, t: f64) -> f64 {
        t.clamp(self.lower_time(), self.upper_time())
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn mask_state(&self) -> Option<usize> {
        match self.kind {
            ScheduleKind::Masked => Some(self.num_states - 1),
            ScheduleKind::Uniform => None,
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        match self.family {
            AlphaFamily::Linear => 1.0 - u,
            AlphaFamily::Cosine => (FRAC_PI_2 * u).cos(),
        }
    }

    pub fn alpha_prime(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        match self.family {
            AlphaFamily::Linear => -1.0 / self.horizon,
            AlphaFamily::Cosine => -(FRAC_PI_2 / self.horizon) * (FRAC_PI_2 * u).sin(),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        1.0 - self.alpha(t)
    }

    fn check_kernel_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.num_states {
            return Err(domain(format!("state {x} out of range for S = {}", self.num_states)));
        }
        Ok(())
    }

    /// `q_{t|0}(x | x0)` without allocating.
    pub fn kernel_prob(&self, t: f64, x0: usize, x: usize) -> f64 {
        let a = self.alpha(t);
        let onehot = if x == x0 { a } else { 0.0 };
        onehot + (1.0 - a) * self.pi[x]
    }

    /// Forward kernel row `q_{t|0}(. | x0)`.
    pub fn forward_kernel(&self, t: f64, x0: usize) -> Result<Vec<f64>> {
        self.check_kernel_time(t)?;
        self.check_state(x0)?;
        Ok((0..self.num_states).map(|x| self.kernel_prob(t, x0, x)).collect())
    }

    /// Marginal `q_t = sum_x0 p_data(x0) q_{t|0}(. | x0)`.
    pub fn marginal(&self, t: f64, p_data: &[f64]) -> Result<Vec<f64>> {
        self.check_kernel_time(t)?;
        if p_data.len() != self.num_states {
            return Err(domain("p_data length must equal num_states"));
        }
        let a = self.alpha(t);
        Ok((0..self.num_states)
            .map(|x| a * p_data[x] + (1.0 - a) * self.pi[x])
            .collect())
    }

    /// Validates `t` for rate evaluation and returns `-alpha'_t / alpha_t`.
    ///
    /// Every off-diagonal forward rate is this coefficient times `pi_j`.
    pub fn rate_coefficient(&self, t: f64) -> Result<f64> {
        if t < 0.0 || t > self.upper_time() * (1.0 + 1e-12) {
            return Err(domain(format!(
                "rate requested at t = {t}, outside [0, T - eps] = [0, {}]",
                self.upper_time()
            )));
        }
        let a = self.alpha(t);
        if a <= 0.0 {
            return Err(Error::Singular { t, alpha: a });
        }
        Ok(-self.alpha_prime(t) / a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedules() -> Vec<Schedule> {
        let mut out = Vec::new();
        for fam in [AlphaFamily::Linear, AlphaFamily::Cosine] {
            for t in [1.0, 2.5] {
                out.push(Schedule::uniform(4, fam, t).unwrap());
                out.push(Schedule::masked(4, fam, t).unwrap());
            }
        }
        out
    }

    #[test]
    fn alpha_endpoints_and_monotone() {
        for s in schedules() {
            assert!((s.alpha(0.0) - 1.0).abs() < 1e-12);
            assert!(s.alpha(s.horizon()).abs() < 1e-12);
            let mut prev = s.alpha(0.0);
            for k in 1..200 {
                let a = s.alpha(s.horizon() * k as f64 / 200.0);
                assert!(a < prev);
                assert!((a + s.beta(s.horizon() * k as f64 / 200.0) - 1.0).abs() < 1e-15);
                prev = a;
            }
        }
    }

    #[test]
    fn alpha_prime_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in schedules() {
            for _ in 0..100 {
                let t = rng.random_range(0.01..0.99) * s.horizon();
                let h = 1e-5 * s.horizon();
                let fd = (s.alpha(t + h) - s.alpha(t - h)) / (2.0 * h);
                let rel = (fd - s.alpha_prime(t)).abs() / s.alpha_prime(t).abs();
                assert!(rel < 1e-6, "rel {rel}");
            }
        }
    }

    #[test]
    fn pi_is_a_distribution() {
        for s in schedules() {
            let total: f64 = s.pi().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.pi().iter().all(|&p| p >= 0.0));
            if s.kind() == ScheduleKind::Masked {
                assert_eq!(s.pi()[s.mask_state().unwrap()], 1.0);
            }
        }
    }

    #[test]
    fn kernel_examples() {
        let s = Schedule::uniform(4, AlphaFamily::Linear, 1.0).unwrap();
        // alpha_t = 0.6 at t = 0.4
        let k = s.forward_kernel(0.4, 0).unwrap();
        let want = [0.7, 0.1, 0.1, 0.1];
        for (a, b) in k.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.forward_kernel(0.0, 2).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let end = s.forward_kernel(1.0, 3).unwrap();
        for (a, b) in end.iter().zip(s.pi()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_rejects_out_of_range_time() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        assert!(matches!(s.forward_kernel(1.5, 0), Err(Error::Domain(_))));
        assert!(matches!(s.forward_kernel(-0.1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn rate_coefficient_singular_at_horizon() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0)
            .unwrap()
            .with_eps(0.0)
            .unwrap();
        assert!(matches!(s.rate_coefficient(1.0), Err(Error::Singular { .. })));
        let clamped = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        assert!(matches!(clamped.rate_coefficient(0.9999), Err(Error::Domain(_))));
        assert!((clamped.rate_coefficient(0.5).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn state_space_bound() {
        assert!(Schedule::uniform(1, AlphaFamily::Linear, 1.0).is_err());
        assert!(Schedule::uniform(MAX_STATES + 1, AlphaFamily::Linear, 1.0).is_err());
        assert!(Schedule::uniform(MAX_STATES, AlphaFamily::Linear, 1.0).is_ok());
    }
}

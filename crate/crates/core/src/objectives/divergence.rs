use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// `x log x` with `0 log 0 = 0`.
pub(crate) fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Bregman density of `x log x`: `f(r, c) = r log(r / c) - r + c`.
pub fn bregman_density(r: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(domain(format!("model rate must be positive, got {c}")));
    }
    if !(r >= 0.0) {
        return Err(domain(format!("target rate must be nonnegative, got {r}")));
    }
    if r == 0.0 {
        return Ok(c);
    }
    Ok(r * (r / c).ln() - r + c)
}

/// Poisson KL `lambda log(lambda / lambda') - lambda + lambda'`.
pub fn poisson_kl(lam_true: f64, lam_model: f64) -> Result<f64> {
    bregman_density(lam_true, lam_model)
}

/// A divergence that is `+inf` when absolute continuity fails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Finite(f64),
    /// The model puts zero mass where the target does not.
    Infinite { index: usize },
}

impl Divergence {
    pub fn value(&self) -> f64 {
        match self {
            Self::Finite(v) => *v,
            Self::Infinite { .. } => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Self::Finite(_))
    }
}

/// `sum_j p_j log(p_j / q_j)` with `0 log 0 = 0`.
pub fn categorical_kl(r_true: &[f64], r_model: &[f64]) -> Result<Divergence> {
    if r_true.len() != r_model.len() {
        return Err(domain("categorical_kl needs equal-length vectors"));
    }
    let mut total = 0.0;
    for (j, (&p, &q)) in r_true.iter().zip(r_model).enumerate() {
        if p > 0.0 {
            if !(q > 0.0) {
                return Ok(Divergence::Infinite { index: j });
            }
            total += p * (p / q).ln();
        }
    }
    Ok(Divergence::Finite(total))
}

/// Cross-entropy `-sum_j p_j log q_j` with `0 log 0 = 0`.
pub fn cross_entropy(r_true: &[f64], r_model: &[f64]) -> Result<Divergence> {
    if r_true.len() != r_model.len() {
        return Err(domain("cross_entropy needs equal-length vectors"));
    }
    let mut total = 0.0;
    for (j, (&p, &q)) in r_true.iter().zip(r_model).enumerate() {
        if p > 0.0 {
            if !(q > 0.0) {
                return Ok(Divergence::Infinite { index: j });
            }
            total -= p * q.ln();
        }
    }
    Ok(Divergence::Finite(total))
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| xlogx(x)).sum::<f64>()
}

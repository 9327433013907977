//! Two-headed reverse models `(x_t, t) -> (lambda, r(. | x_t))`.
//!
//! A model emits, for every sequence position, an exit rate and a jump
//! distribution over the other states. Learnable variants additionally
//! expose a flat parameter vector and an analytic backward pass.

mod checkpoint;
mod masked;
mod mlp;
mod optim;
mod tabular;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use masked::MaskedAdapter;
pub use mlp::{Mlp, MlpSpec};
pub use optim::Momentum;
pub use tabular::Tabular;

use serde::{Deserialize, Serialize};

use crate::ctmc::{ExitJump, RateFn};
use crate::error::{domain, Error, Result};

/// Exit rates and jump distributions for each sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub per_position: Vec<ExitJump>,
}

/// Gradient of a scalar loss with respect to one position's head output.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub d_exit: f64,
    pub d_jump: Vec<f64>,
}

impl RowGrad {
    pub fn zeros(num_states: usize) -> Self {
        Self {
            d_exit: 0.0,
            d_jump: vec![0.0; num_states],
        }
    }

    pub fn scale(&mut self, w: f64) {
        self.d_exit *= w;
        self.d_jump.iter_mut().for_each(|g| *g *= w);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub per_position: Vec<RowGrad>,
}

/// A reverse-rate model over sequences of `seq_len` tokens in `0..num_states`.
///
/// The time argument is always forward-process time.
pub trait TwoHead: Sync {
    fn num_states(&self) -> usize;

    fn seq_len(&self) -> usize {
        1
    }

    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput>;

    /// Single-token convenience for `seq_len() == 1` models.
    fn head(&self, t: f64, i: usize) -> Result<ExitJump> {
        let mut out = self.forward(&[i], t)?;
        Ok(out.per_position.swap_remove(0))
    }

    /// Times at which the model may be discontinuous in `t`.
    fn time_breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// A model with a flat parameter vector and analytic gradients.
pub trait Trainable: TwoHead {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Accumulates `d loss / d params` into `grad` given the gradient with
    /// respect to the head outputs of `forward(x, t)`.
    fn backward_into(&self, x: &[usize], t: f64, upstream: &HeadGrad, grad: &mut [f64]) -> Result<()>;

    fn backward(&self, x: &[usize], t: f64, upstream: &HeadGrad) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params().len()];
        self.backward_into(x, t, upstream, &mut grad)?;
        Ok(grad)
    }
}

pub(crate) fn check_sequence(x: &[usize], seq_len: usize, num_states: usize) -> Result<()> {
    if x.len() != seq_len {
        return Err(domain(format!("expected a sequence of length {seq_len}, got {}", x.len())));
    }
    if let Some(&bad) = x.iter().find(|&&s| s >= num_states) {
        return Err(domain(format!("state {bad} out of range for S = {num_states}")));
    }
    Ok(())
}

/// Softmax over every index except `skip`, which gets probability zero.
pub(crate) fn softmax_excluding(logits: &[f64], skip: usize) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| if j == skip { 0.0 } else { (z - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tabular,
    Mlp,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(Self::Tabular),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Parse(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Either learnable variant behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamModel {
    Tabular(Tabular),
    Mlp(Mlp),
}

impl ParamModel {
    pub fn variant(&self) -> Variant {
        match self {
            Self::Tabular(_) => Variant::Tabular,
            Self::Mlp(_) => Variant::Mlp,
        }
    }
}

impl TwoHead for ParamModel {
    fn num_states(&self) -> usize {
        match self {
            Self::Tabular(m) => m.num_states(),
            Self::Mlp(m) => m.num_states(),
        }
    }
    fn seq_len(&self) -> usize {
        match self {
            Self::Tabular(m) => m.seq_len(),
            Self::Mlp(m) => m.seq_len(),
        }
    }
    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput> {
        match self {
            Self::Tabular(m) => m.forward(x, t),
            Self::Mlp(m) => m.forward(x, t),
        }
    }
    fn head(&self, t: f64, i: usize) -> Result<ExitJump> {
        match self {
            Self::Tabular(m) => m.head(t, i),
            Self::Mlp(m) => m.head(t, i),
        }
    }
    fn time_breakpoints(&self) -> Vec<f64> {
        match self {
            Self::Tabular(m) => m.time_breakpoints(),
            Self::Mlp(m) => m.time_breakpoints(),
        }
    }
}

impl Trainable for ParamModel {
    fn params(&self) -> &[f64] {
        match self {
            Self::Tabular(m) => m.params(),
            Self::Mlp(m) => m.params(),
        }
    }
    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Tabular(m) => m.params_mut(),
            Self::Mlp(m) => m.params_mut(),
        }
    }
    fn backward_into(&self, x: &[usize], t: f64, upstream: &HeadGrad, grad: &mut [f64]) -> Result<()> {
        match self {
            Self::Tabular(m) => m.backward_into(x, t, upstream, grad),
            Self::Mlp(m) => m.backward_into(x, t, upstream, grad),
        }
    }
}

/// Views a single-token model as a generator `R(i, j) = lambda(i) r(j | i)`.
pub struct ModelRates<'a, M: TwoHead + ?Sized> {
    model: &'a M,
}

impl<'a, M: TwoHead + ?Sized> ModelRates<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self { model }
    }
}

impl<M: TwoHead + ?Sized> RateFn for ModelRates<'_, M> {
    fn num_states(&self) -> usize {
        self.model.num_states()
    }
    fn rate(&self, t: f64, i: usize, j: usize) -> Result<f64> {
        if i == j {
            return Ok(0.0);
        }
        Ok(self.model.head(t, i)?.rate_to(j))
    }
    fn exit_rate(&self, t: f64, i: usize) -> Result<f64> {
        Ok(self.model.head(t, i)?.exit_rate)
    }
    fn exit_jump(&self, t: f64, i: usize) -> Result<ExitJump> {
        self.model.head(t, i)
    }
    fn time_breakpoints(&self) -> Vec<f64> {
        self.model.time_breakpoints()
    }
}

/// A model that never jumps.
#[derive(Debug, Clone, Copy)]
pub struct ZeroRate {
    pub num_states: usize,
    pub seq_len: usize,
}

impl TwoHead for ZeroRate {
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn forward(&self, x: &[usize], _t: f64) -> Result<HeadOutput> {
        check_sequence(x, self.seq_len, self.num_states)?;
        Ok(HeadOutput {
            per_position: vec![ExitJump::absorbing(self.num_states); self.seq_len],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_excluding_zeroes_the_skipped_entry() {
        let p = softmax_excluding(&[1.0, 100.0, 2.0], 1);
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
        assert!((p[2] / p[0] - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_model_is_absorbing() {
        let m = ZeroRate { num_states: 3, seq_len: 2 };
        let out = m.forward(&[0, 2], 0.5).unwrap();
        assert!(out.per_position.iter().all(ExitJump::is_absorbing));
        assert!(m.forward(&[0, 3], 0.5).is_err());
    }
}

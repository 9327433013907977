use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_sequence, softmax_excluding, HeadGrad, HeadOutput, Trainable, TwoHead};
use crate::ctmc::ExitJump;
use crate::error::{domain, Result};

/// Shape of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub num_states: usize,
    pub seq_len: usize,
    pub horizon: f64,
    pub width: usize,
    /// Number of sinusoidal time features; must be even.
    pub time_features: usize,
}

impl MlpSpec {
    pub const DEFAULT_WIDTH: usize = 64;
    pub const DEFAULT_TIME_FEATURES: usize = 16;

    pub fn new(num_states: usize, seq_len: usize, horizon: f64) -> Self {
        Self {
            num_states,
            seq_len,
            horizon,
            width: Self::DEFAULT_WIDTH,
            time_features: Self::DEFAULT_TIME_FEATURES,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_states < 2 || self.seq_len == 0 || !(self.horizon > 0.0) || self.width == 0 {
            return Err(domain("mlp needs S >= 2, L >= 1, T > 0, width >= 1"));
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return Err(domain("mlp time_features must be a positive even number"));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.seq_len * self.num_states + self.time_features
    }

    fn output_dim(&self) -> usize {
        self.seq_len * (self.num_states + 1)
    }

    pub fn num_params(&self) -> usize {
        let (d, h, o) = (self.input_dim(), self.width, self.output_dim());
        h * d + h + h * h + h + o * h + o
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl Layout {
    fn of(spec: &MlpSpec) -> Self {
        let (d, h, o) = (spec.input_dim(), spec.width, spec.output_dim());
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Self { w1, b1, w2, b2, w3, b3 }
    }
}

/// Two tanh hidden layers over a one-hot encoding of the whole sequence
/// plus sinusoidal time features. Each position gets `[raw lambda, S logits]`
/// from the output layer; the self logit is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Layout,
    params: Vec<f64>,
}

struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    /// Hidden layers use a uniform fan-in init, the output layer starts at
    /// zero weight so every head is uniform with log exit rates drawn from
    /// `[ln 0.5, ln 2]`.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        let l = m.layout;
        let h = spec.width;
        // At most `L + F` inputs are nonzero at once.
        let a1 = (3.0 / (spec.seq_len + spec.time_features) as f64).sqrt();
        for w in &mut m.params[l.w1..l.b1] {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (3.0 / h as f64).sqrt();
        for w in &mut m.params[l.w2..l.b2] {
            *w = rng.random_range(-a2..a2);
        }
        let (lo, hi) = (0.5f64.ln(), 2f64.ln());
        let s = spec.num_states;
        for pos in 0..spec.seq_len {
            m.params[l.b3 + pos * (s + 1)] = rng.random_range(lo..hi);
        }
        Ok(m)
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            layout: Layout::of(&spec),
            params: vec![0.0; spec.num_params()],
            spec,
        })
    }

    pub(crate) fn from_parts(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        if params.len() != m.params.len() {
            return Err(domain(format!("expected {} parameters, got {}", m.params.len(), params.len())));
        }
        m.params = params;
        Ok(m)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn time_features(&self, t: f64) -> Vec<f64> {
        let half = self.spec.time_features / 2;
        let mut f = Vec::with_capacity(self.spec.time_features);
        for k in 0..half {
            let w = (k + 1) as f64 * std::f64::consts::PI / self.spec.horizon;
            f.push((w * t).sin());
            f.push((w * t).cos());
        }
        f
    }

    fn activations(&self, x: &[usize], t: f64) -> Activations {
        let spec = &self.spec;
        let l = self.layout;
        let (d, h, o, s) = (spec.input_dim(), spec.width, spec.output_dim(), spec.num_states);
        let p = &self.params;
        let tf = self.time_features(t);
        let tf_off = spec.seq_len * s;

        let mut h1 = p[l.b1..l.b1 + h].to_vec();
        for (u, acc) in h1.iter_mut().enumerate() {
            let row = &p[l.w1 + u * d..l.w1 + (u + 1) * d];
            for (pos, &xi) in x.iter().enumerate() {
                *acc += row[pos * s + xi];
            }
            for (k, &f) in tf.iter().enumerate() {
                *acc += row[tf_off + k] * f;
            }
            *acc = acc.tanh();
        }

        let mut h2 = p[l.b2..l.b2 + h].to_vec();
        for (u, acc) in h2.iter_mut().enumerate() {
            let row = &p[l.w2 + u * h..l.w2 + (u + 1) * h];
            *acc += row.iter().zip(&h1).map(|(w, a)| w * a).sum::<f64>();
            *acc = acc.tanh();
        }

        let mut out = p[l.b3..l.b3 + o].to_vec();
        for (u, acc) in out.iter_mut().enumerate() {
            let row = &p[l.w3 + u * h..l.w3 + (u + 1) * h];
            *acc += row.iter().zip(&h2).map(|(w, a)| w * a).sum::<f64>();
        }
        Activations { h1, h2, out }
    }

    fn heads(&self, x: &[usize], out: &[f64]) -> Vec<ExitJump> {
        let s = self.spec.num_states;
        x.iter()
            .enumerate()
            .map(|(pos, &i)| {
                let block = &out[pos * (s + 1)..(pos + 1) * (s + 1)];
                ExitJump {
                    exit_rate: block[0].exp(),
                    jump_dist: softmax_excluding(&block[1..], i),
                }
            })
            .collect()
    }
}

impl TwoHead for Mlp {
    fn num_states(&self) -> usize {
        self.spec.num_states
    }

    fn seq_len(&self) -> usize {
        self.spec.seq_len
    }

    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput> {
        check_sequence(x, self.spec.seq_len, self.spec.num_states)?;
        let act = self.activations(x, t);
        Ok(HeadOutput {
            per_position: self.heads(x, &act.out),
        })
    }
}

impl Trainable for Mlp {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward_into(&self, x: &[usize], t: f64, upstream: &HeadGrad, grad: &mut [f64]) -> Result<()> {
        check_sequence(x, self.spec.seq_len, self.spec.num_states)?;
        let spec = &self.spec;
        let l = self.layout;
        let (d, h, o, s) = (spec.input_dim(), spec.width, spec.output_dim(), spec.num_states);
        let p = &self.params;
        let act = self.activations(x, t);
        let heads = self.heads(x, &act.out);

        let mut d_out = vec![0.0; o];
        for (pos, ((&i, head), g)) in x.iter().zip(&heads).zip(&upstream.per_position).enumerate() {
            let base = pos * (s + 1);
            d_out[base] = head.exit_rate * g.d_exit;
            let mean: f64 = head.jump_dist.iter().zip(&g.d_jump).map(|(r, d)| r * d).sum();
            for j in 0..s {
                if j != i {
                    d_out[base + 1 + j] = head.jump_dist[j] * (g.d_jump[j] - mean);
                }
            }
        }

        let mut d_h2 = vec![0.0; h];
        for (u, &du) in d_out.iter().enumerate() {
            if du == 0.0 {
                continue;
            }
            grad[l.b3 + u] += du;
            let row = l.w3 + u * h;
            for k in 0..h {
                grad[row + k] += du * act.h2[k];
                d_h2[k] += du * p[row + k];
            }
        }
        for (k, dh) in d_h2.iter_mut().enumerate() {
            *dh *= 1.0 - act.h2[k] * act.h2[k];
        }

        let mut d_h1 = vec![0.0; h];
        for (u, &du) in d_h2.iter().enumerate() {
            grad[l.b2 + u] += du;
            let row = l.w2 + u * h;
            for k in 0..h {
                grad[row + k] += du * act.h1[k];
                d_h1[k] += du * p[row + k];
            }
        }
        for (k, dh) in d_h1.iter_mut().enumerate() {
            *dh *= 1.0 - act.h1[k] * act.h1[k];
        }

        let tf = self.time_features(t);
        let tf_off = spec.seq_len * s;
        for (u, &du) in d_h1.iter().enumerate() {
            grad[l.b1 + u] += du;
            let row = l.w1 + u * d;
            for (pos, &xi) in x.iter().enumerate() {
                grad[row + pos * s + xi] += du;
            }
            for (k, &f) in tf.iter().enumerate() {
                grad[row + tf_off + k] += du * f;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RowGrad;
    use crate::rng::seeded;

    fn small() -> Mlp {
        let spec = MlpSpec { width: 8, time_features: 4, ..MlpSpec::new(3, 2, 1.0) };
        let mut m = Mlp::new(spec, &mut seeded(5)).unwrap();
        // Break the zero output layer so every path carries signal.
        let mut rng = seeded(6);
        let l = m.layout;
        for w in &mut m.params[l.w3..l.b3] {
            *w = rng.random_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn fresh_model_is_uniform_with_rates_in_band() {
        let m = Mlp::new(MlpSpec::new(4, 3, 1.0), &mut seeded(1)).unwrap();
        for t in [0.1, 0.5, 0.9] {
            let out = m.forward(&[0, 3, 1], t).unwrap();
            for (head, &i) in out.per_position.iter().zip(&[0, 3, 1]) {
                assert!(head.exit_rate >= 0.5 && head.exit_rate <= 2.0);
                for j in 0..4 {
                    let want = if j == i { 0.0 } else { 1.0 / 3.0 };
                    assert!((head.jump_dist[j] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn output_is_continuous_in_time() {
        let m = small();
        let a = m.forward(&[2, 0], 0.4).unwrap();
        let b = m.forward(&[2, 0], 0.4 + 1e-7).unwrap();
        for (x, y) in a.per_position.iter().zip(&b.per_position) {
            assert!((x.exit_rate - y.exit_rate).abs() <= 1e-4);
            for (p, q) in x.jump_dist.iter().zip(&y.jump_dist) {
                assert!((p - q).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = small();
        let up = HeadGrad { per_position: vec![RowGrad::zeros(3), RowGrad::zeros(3)] };
        assert!(m.backward(&[1, 2], 0.3, &up).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn context_changes_other_positions() {
        let m = small();
        let a = m.forward(&[0, 1], 0.3).unwrap();
        let b = m.forward(&[2, 1], 0.3).unwrap();
        assert_ne!(a.per_position[1], b.per_position[1]);
    }

    #[test]
    fn odd_time_features_are_rejected() {
        let spec = MlpSpec { time_features: 3, ..MlpSpec::new(3, 1, 1.0) };
        assert!(Mlp::zeros(spec).is_err());
    }
}

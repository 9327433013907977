use rand::Rng;

use super::{check_sequence, softmax_excluding, HeadGrad, HeadOutput, Trainable, TwoHead};
use crate::ctmc::ExitJump;
use crate::error::{domain, Result};

/// Lookup-table model: one log exit rate and `S - 1` jump logits per
/// (time bucket, state). Context-free, so sequence positions are
/// independent applications of the same table.
///
/// Parameter layout: block `(bucket * S + state) * S`, holding
/// `[log lambda, logit_j for j != state in increasing j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabular {
    num_states: usize,
    seq_len: usize,
    buckets: usize,
    horizon: f64,
    params: Vec<f64>,
}

/// Exit rates of a fresh model are drawn log-uniformly from this band.
pub const INIT_RATE_BAND: (f64, f64) = (0.5, 2.0);

impl Tabular {
    pub fn new(num_states: usize, seq_len: usize, buckets: usize, horizon: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(num_states, seq_len, buckets, horizon)?;
        let (lo, hi) = (INIT_RATE_BAND.0.ln(), INIT_RATE_BAND.1.ln());
        for block in m.params.chunks_mut(num_states) {
            block[0] = rng.random_range(lo..hi);
        }
        Ok(m)
    }

    /// All exit rates 1, all jump distributions uniform.
    pub fn zeros(num_states: usize, seq_len: usize, buckets: usize, horizon: f64) -> Result<Self> {
        if num_states < 2 || seq_len == 0 || buckets == 0 || !(horizon > 0.0) {
            return Err(domain("tabular model needs S >= 2, L >= 1, buckets >= 1, T > 0"));
        }
        Ok(Self {
            num_states,
            seq_len,
            buckets,
            horizon,
            params: vec![0.0; buckets * num_states * num_states],
        })
    }

    pub(crate) fn from_parts(num_states: usize, seq_len: usize, buckets: usize, horizon: f64, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(num_states, seq_len, buckets, horizon)?;
        if params.len() != m.params.len() {
            return Err(domain(format!("expected {} parameters, got {}", m.params.len(), params.len())));
        }
        m.params = params;
        Ok(m)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn bucket(&self, t: f64) -> usize {
        let b = (t / self.horizon * self.buckets as f64).floor();
        (b.max(0.0) as usize).min(self.buckets - 1)
    }

    /// Midpoint of bucket `b`.
    pub fn bucket_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * self.horizon / self.buckets as f64
    }

    /// Offset of the parameter block for `(bucket, state)`.
    pub fn block(&self, bucket: usize, state: usize) -> usize {
        (bucket * self.num_states + state) * self.num_states
    }

    /// Overwrite one cell so that it reproduces `target` exactly.
    /// Requires a positive exit rate and full support off the diagonal.
    pub fn set_cell(&mut self, bucket: usize, state: usize, target: &ExitJump) -> Result<()> {
        if !(target.exit_rate > 0.0) {
            return Err(domain("tabular cells need a positive exit rate"));
        }
        let off = self.block(bucket, state);
        self.params[off] = target.exit_rate.ln();
        let mut k = 1;
        for j in 0..self.num_states {
            if j == state {
                continue;
            }
            let p = target.jump_dist[j];
            if !(p > 0.0) {
                return Err(domain("tabular cells need positive jump probabilities"));
            }
            self.params[off + k] = p.ln();
            k += 1;
        }
        Ok(())
    }

    fn cell(&self, bucket: usize, state: usize) -> ExitJump {
        let s = self.num_states;
        let off = self.block(bucket, state);
        let block = &self.params[off..off + s];
        let mut logits = vec![0.0; s];
        let mut k = 1;
        for (j, z) in logits.iter_mut().enumerate() {
            if j != state {
                *z = block[k];
                k += 1;
            }
        }
        ExitJump {
            exit_rate: block[0].exp(),
            jump_dist: softmax_excluding(&logits, state),
        }
    }
}

impl TwoHead for Tabular {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn forward(&self, x: &[usize], t: f64) -> Result<HeadOutput> {
        check_sequence(x, self.seq_len, self.num_states)?;
        let b = self.bucket(t);
        Ok(HeadOutput {
            per_position: x.iter().map(|&i| self.cell(b, i)).collect(),
        })
    }

    fn head(&self, t: f64, i: usize) -> Result<ExitJump> {
        if i >= self.num_states {
            return Err(domain(format!("state {i} out of range")));
        }
        Ok(self.cell(self.bucket(t), i))
    }

    fn time_breakpoints(&self) -> Vec<f64> {
        (1..self.buckets)
            .map(|b| b as f64 * self.horizon / self.buckets as f64)
            .collect()
    }
}

impl Trainable for Tabular {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward_into(&self, x: &[usize], t: f64, upstream: &HeadGrad, grad: &mut [f64]) -> Result<()> {
        check_sequence(x, self.seq_len, self.num_states)?;
        let b = self.bucket(t);
        for (&i, g) in x.iter().zip(&upstream.per_position) {
            let cell = self.cell(b, i);
            let off = self.block(b, i);
            grad[off] += cell.exit_rate * g.d_exit;
            let mean: f64 = cell
                .jump_dist
                .iter()
                .zip(&g.d_jump)
                .map(|(p, d)| p * d)
                .sum();
            let mut k = 1;
            for j in 0..self.num_states {
                if j != i {
                    grad[off + k] += cell.jump_dist[j] * (g.d_jump[j] - mean);
                    k += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{marginal_reverse, AlphaFamily, Schedule};
    use crate::model::RowGrad;
    use crate::rng::seeded;

    #[test]
    fn fresh_model_obeys_init_contract() {
        let m = Tabular::new(5, 1, 8, 1.0, &mut seeded(3)).unwrap();
        for b in 0..8 {
            for i in 0..5 {
                let c = m.head(m.bucket_center(b), i).unwrap();
                assert!(c.exit_rate >= 0.5 && c.exit_rate <= 2.0);
                for j in 0..5 {
                    let want = if j == i { 0.0 } else { 0.25 };
                    assert!((c.jump_dist[j] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn exact_cells_reproduce_targets() {
        let s = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
        let p = [0.6, 0.3, 0.1];
        let mut m = Tabular::zeros(3, 1, 16, 1.0).unwrap();
        for b in 0..16 {
            for i in 0..3 {
                let tgt = marginal_reverse(&s, &p, m.bucket_center(b), i).unwrap();
                m.set_cell(b, i, &tgt.exit_jump()).unwrap();
            }
        }
        for b in 0..16 {
            let t = m.bucket_center(b);
            for i in 0..3 {
                let tgt = marginal_reverse(&s, &p, t, i).unwrap();
                let got = m.head(t, i).unwrap();
                assert!((got.exit_rate - tgt.exit_rate).abs() < 1e-12 * tgt.exit_rate.max(1.0));
                for j in 0..3 {
                    assert!((got.jump_dist[j] - tgt.jump_dist[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_touches_only_visited_cells() {
        let m = Tabular::new(4, 2, 4, 1.0, &mut seeded(1)).unwrap();
        let up = HeadGrad {
            per_position: vec![
                RowGrad { d_exit: 0.3, d_jump: vec![0.1, -0.2, 0.5, 0.0] },
                RowGrad { d_exit: -1.0, d_jump: vec![0.0, 0.0, 0.0, 1.0] },
            ],
        };
        let g = m.backward(&[1, 3], 0.6, &up).unwrap();
        let b = m.bucket(0.6);
        let touched: Vec<usize> = (0..g.len()).filter(|&k| g[k] != 0.0).collect();
        let allowed = |k: usize| {
            let blk = k / 4;
            blk == b * 4 + 1 || blk == b * 4 + 3
        };
        assert!(!touched.is_empty());
        assert!(touched.iter().all(|&k| allowed(k)));
        let zero = HeadGrad {
            per_position: vec![RowGrad::zeros(4), RowGrad::zeros(4)],
        };
        assert!(m.backward(&[1, 3], 0.6, &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_state_is_rejected() {
        let m = Tabular::zeros(3, 1, 4, 1.0).unwrap();
        assert!(m.forward(&[3], 0.5).is_err());
        assert!(m.forward(&[0, 1], 0.5).is_err());
    }
}

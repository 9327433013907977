//! Toy datasets with exact probabilities where enumeration is feasible.

use rand::Rng;

use super::config::{DatasetKind, DatasetSpec};
use crate::error::{domain, Result};
use crate::rng::categorical;

/// Largest support enumerated for iid categorical data.
pub const MAX_ENUMERATED: usize = 4096;

pub const GRID_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    kind: DatasetKind,
    vocab: usize,
    seq_len: usize,
    probs: Vec<f64>,
    /// Row-major `vocab x vocab`; Markov data only.
    transition: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || (total - 1.0).abs() > 1e-9 {
        return Err(domain(format!("{what} must be a probability vector summing to 1")));
    }
    Ok(())
}

impl ToyDataset {
    /// iid tokens from `probs` at each of `seq_len` positions. `vocab = probs.len() <= 16`.
    pub fn categorical(probs: Vec<f64>, seq_len: usize) -> Result<Self> {
        if !(2..=16).contains(&probs.len()) || seq_len == 0 {
            return Err(domain("categorical data needs 2..=16 categories and seq_len >= 1"));
        }
        check_distribution(&probs, "dataset.probs")?;
        Ok(Self { kind: DatasetKind::CategoricalIid, vocab: probs.len(), seq_len, probs, transition: Vec::new() })
    }

    /// Order-1 Markov chain with initial law `initial` and row-major `transition`.
    pub fn markov(initial: Vec<f64>, transition: Vec<f64>, seq_len: usize) -> Result<Self> {
        let v = initial.len();
        if !(2..=16).contains(&v) || !(1..=32).contains(&seq_len) {
            return Err(domain("Markov data needs 2..=16 states and 1..=32 positions"));
        }
        if transition.len() != v * v {
            return Err(domain(format!("dataset.transition needs {} entries", v * v)));
        }
        check_distribution(&initial, "dataset.probs")?;
        for row in transition.chunks(v) {
            check_distribution(row, "each transition row")?;
        }
        Ok(Self { kind: DatasetKind::MarkovSequences, vocab: v, seq_len, probs: initial, transition })
    }

    /// Flattened 8x8 binary images, each a filled axis-aligned rectangle
    /// with sides in `2..=5` placed uniformly.
    pub fn grid_image() -> Self {
        Self {
            kind: DatasetKind::GridImage,
            vocab: 2,
            seq_len: GRID_SIDE * GRID_SIDE,
            probs: Vec::new(),
            transition: Vec::new(),
        }
    }

    pub fn from_spec(spec: &DatasetSpec, seq_len: usize) -> Result<Self> {
        match spec.kind {
            DatasetKind::CategoricalIid => Self::categorical(spec.probs.clone(), seq_len),
            DatasetKind::MarkovSequences => Self::markov(spec.probs.clone(), spec.transition.clone(), seq_len),
            DatasetKind::GridImage => {
                if seq_len != GRID_SIDE * GRID_SIDE {
                    return Err(domain("grid_image data needs model.seq_len = 64"));
                }
                Ok(Self::grid_image())
            }
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    /// Number of token values the data uses (excludes any mask state).
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn enumerable(&self) -> bool {
        match self.kind {
            DatasetKind::CategoricalIid => (self.vocab as f64).powi(self.seq_len as i32) <= MAX_ENUMERATED as f64,
            DatasetKind::MarkovSequences => self.seq_len <= 8 && self.vocab <= 4,
            DatasetKind::GridImage => false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        match self.kind {
            DatasetKind::CategoricalIid => (0..self.seq_len).map(|_| draw(rng, &self.probs)).collect(),
            DatasetKind::MarkovSequences => {
                let mut x = Vec::with_capacity(self.seq_len);
                let mut s = draw(rng, &self.probs);
                x.push(s);
                for _ in 1..self.seq_len {
                    s = draw(rng, &self.transition[s * self.vocab..(s + 1) * self.vocab]);
                    x.push(s);
                }
                x
            }
            DatasetKind::GridImage => {
                let w = rng.random_range(2..=5);
                let h = rng.random_range(2..=5);
                let x0 = rng.random_range(0..=GRID_SIDE - w);
                let y0 = rng.random_range(0..=GRID_SIDE - h);
                let mut img = vec![0; GRID_SIDE * GRID_SIDE];
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        img[y * GRID_SIDE + x] = 1;
                    }
                }
                img
            }
        }
    }

    /// Probability of one sequence; `None` for sampled-only kinds.
    pub fn prob(&self, x: &[usize]) -> Option<f64> {
        if x.len() != self.seq_len || x.iter().any(|&s| s >= self.vocab) {
            return Some(0.0);
        }
        match self.kind {
            DatasetKind::CategoricalIid => Some(x.iter().map(|&s| self.probs[s]).product()),
            DatasetKind::MarkovSequences => {
                let mut p = self.probs[x[0]];
                for w in x.windows(2) {
                    p *= self.transition[w[0] * self.vocab + w[1]];
                }
                Some(p)
            }
            DatasetKind::GridImage => None,
        }
    }

    /// Every sequence with positive probability, in lexicographic order.
    pub fn support(&self) -> Option<Vec<(Vec<usize>, f64)>> {
        if !self.enumerable() {
            return None;
        }
        let total = self.vocab.pow(self.seq_len as u32);
        let mut out = Vec::new();
        let mut x = vec![0; self.seq_len];
        for code in 0..total {
            let mut c = code;
            for pos in (0..self.seq_len).rev() {
                x[pos] = c % self.vocab;
                c /= self.vocab;
            }
            let p = self.prob(&x)?;
            if p > 0.0 {
                out.push((x.clone(), p));
            }
        }
        Some(out)
    }

    /// Single-token `p_data` padded with zeros to `num_states` (a mask
    /// state, if any, gets zero mass).
    pub fn p_data(&self, num_states: usize) -> Result<Vec<f64>> {
        if self.seq_len != 1 || self.kind == DatasetKind::GridImage {
            return Err(domain("an explicit p_data vector needs single-token enumerable data"));
        }
        if num_states < self.vocab {
            return Err(domain("schedule has fewer states than the data vocabulary"));
        }
        let mut p = self.probs.clone();
        p.resize(num_states, 0.0);
        Ok(p)
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    categorical(rng, p).expect("validated probability vector")
}

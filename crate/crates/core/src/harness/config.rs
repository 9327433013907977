//! Flat `key = value` experiment configuration. `#` starts a comment;
//! unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ctmc::{AlphaFamily, Schedule, ScheduleKind, DEFAULT_EPS_FRACTION};
use crate::error::{Error, Result};
use crate::model::{MlpSpec, Variant};
use crate::objectives::LossKind;
use crate::samplers::Scheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub alpha: AlphaFamily,
    pub states: usize,
    pub horizon: f64,
    /// `None` means `1e-3 T`.
    pub eps: Option<f64>,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        let s = Schedule::new(self.kind, self.alpha, self.states, self.horizon)?;
        match self.eps {
            Some(e) => s.with_eps(e),
            None => Ok(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub seq_len: usize,
    pub buckets: usize,
    pub width: usize,
    pub time_features: usize,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    None,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr_decay: LrDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub log_every: usize,
    /// Adds elapsed seconds to metrics records, which then differ between runs.
    pub log_wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub scheme: Scheme,
    pub steps: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CategoricalIid,
    MarkovSequences,
    GridImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Category probabilities (`categorical_iid`) or the initial
    /// distribution (`markov_sequences`).
    pub probs: Vec<f64>,
    /// Row-major transition matrix for `markov_sequences`.
    pub transition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectSpec {
    pub temperature: f64,
    pub max_updates: usize,
    pub noise_level: f64,
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub paths: usize,
    pub x0: usize,
    /// `None` means `T - eps`.
    pub t_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSpec {
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySpec {
    /// Suite whose identity is perturbed on purpose, for mutation testing.
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub objective: LossKind,
    pub optim: OptimSpec,
    pub train: TrainSpec,
    pub sampler: SamplerSpec,
    pub dataset: DatasetSpec,
    pub self_correct: SelfCorrectSpec,
    pub simulate: SimulateSpec,
    pub export: ExportSpec,
    pub verify: VerifySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            schedule: ScheduleSpec {
                kind: ScheduleKind::Uniform,
                alpha: AlphaFamily::Linear,
                states: 3,
                horizon: 1.0,
                eps: None,
            },
            model: ModelSpec {
                variant: Variant::Tabular,
                seq_len: 1,
                buckets: 64,
                width: MlpSpec::DEFAULT_WIDTH,
                time_features: MlpSpec::DEFAULT_TIME_FEATURES,
                checkpoint: None,
            },
            objective: LossKind::CondStable,
            optim: OptimSpec { lr: 1e-2, momentum: 0.9, steps: 1000, batch: 64, lr_decay: LrDecay::None },
            train: TrainSpec { log_every: 100, log_wall_clock: false },
            sampler: SamplerSpec { scheme: Scheme::TauLeaping, steps: 256, samples: 1000 },
            dataset: DatasetSpec { kind: DatasetKind::CategoricalIid, probs: vec![0.7, 0.3, 0.0], transition: Vec::new() },
            self_correct: SelfCorrectSpec { temperature: 0.1, max_updates: 4, noise_level: 0.25, input: None },
            simulate: SimulateSpec { paths: 100, x0: 0, t_end: None },
            export: ExportSpec { times: vec![0.0, 0.25, 0.5, 0.75, 0.999] },
            verify: VerifySpec { inject_fault: None },
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "schedule.kind",
    "schedule.alpha",
    "schedule.states",
    "schedule.horizon",
    "schedule.eps",
    "model.variant",
    "model.seq_len",
    "model.buckets",
    "model.width",
    "model.time_features",
    "model.checkpoint",
    "objective",
    "optim.lr",
    "optim.momentum",
    "optim.steps",
    "optim.batch",
    "optim.lr_decay",
    "train.log_every",
    "train.log_wall_clock",
    "sampler.scheme",
    "sampler.steps",
    "sampler.samples",
    "dataset.kind",
    "dataset.probs",
    "dataset.transition",
    "self_correct.temperature",
    "self_correct.max_updates",
    "self_correct.noise_level",
    "self_correct.input",
    "simulate.paths",
    "simulate.x0",
    "simulate.t_end",
    "export.times",
    "verify.inject_fault",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Parse(format!("`{key}`: unknown value `{v}`")))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("config enums serialize to strings"),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Parse(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let mut c = Self::default();
        for (k, v) in &entries {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt = |v: &str| if v.is_empty() { None } else { Some(v.to_string()) };
        match key {
            "seed" => self.seed = Some(parse_num(key, v)?),
            "schedule.kind" => self.schedule.kind = parse_enum(key, v)?,
            "schedule.alpha" => self.schedule.alpha = parse_enum(key, v)?,
            "schedule.states" => self.schedule.states = parse_num(key, v)?,
            "schedule.horizon" => self.schedule.horizon = parse_num(key, v)?,
            "schedule.eps" => self.schedule.eps = Some(parse_num(key, v)?),
            "model.variant" => self.model.variant = parse_enum(key, v)?,
            "model.seq_len" => self.model.seq_len = parse_num(key, v)?,
            "model.buckets" => self.model.buckets = parse_num(key, v)?,
            "model.width" => self.model.width = parse_num(key, v)?,
            "model.time_features" => self.model.time_features = parse_num(key, v)?,
            "model.checkpoint" => self.model.checkpoint = opt(v),
            "objective" => self.objective = parse_enum(key, v)?,
            "optim.lr" => self.optim.lr = parse_num(key, v)?,
            "optim.momentum" => self.optim.momentum = parse_num(key, v)?,
            "optim.steps" => self.optim.steps = parse_num(key, v)?,
            "optim.batch" => self.optim.batch = parse_num(key, v)?,
            "optim.lr_decay" => self.optim.lr_decay = parse_enum(key, v)?,
            "train.log_every" => self.train.log_every = parse_num(key, v)?,
            "train.log_wall_clock" => self.train.log_wall_clock = parse_bool(key, v)?,
            "sampler.scheme" => self.sampler.scheme = v.parse()?,
            "sampler.steps" => self.sampler.steps = parse_num(key, v)?,
            "sampler.samples" => self.sampler.samples = parse_num(key, v)?,
            "dataset.kind" => self.dataset.kind = parse_enum(key, v)?,
            "dataset.probs" => self.dataset.probs = parse_list(key, v)?,
            "dataset.transition" => self.dataset.transition = parse_list(key, v)?,
            "self_correct.temperature" => self.self_correct.temperature = parse_num(key, v)?,
            "self_correct.max_updates" => self.self_correct.max_updates = parse_num(key, v)?,
            "self_correct.noise_level" => self.self_correct.noise_level = parse_num(key, v)?,
            "self_correct.input" => self.self_correct.input = opt(v),
            "simulate.paths" => self.simulate.paths = parse_num(key, v)?,
            "simulate.x0" => self.simulate.x0 = parse_num(key, v)?,
            "simulate.t_end" => self.simulate.t_end = Some(parse_num(key, v)?),
            "export.times" => self.export.times = parse_list(key, v)?,
            "verify.inject_fault" => self.verify.inject_fault = opt(v),
            other => return Err(Error::Parse(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        put("schedule.kind", enum_name(&self.schedule.kind));
        put("schedule.alpha", enum_name(&self.schedule.alpha));
        put("schedule.states", self.schedule.states.to_string());
        put("schedule.horizon", self.schedule.horizon.to_string());
        if let Some(e) = self.schedule.eps {
            put("schedule.eps", e.to_string());
        }
        put("model.variant", enum_name(&self.model.variant));
        put("model.seq_len", self.model.seq_len.to_string());
        put("model.buckets", self.model.buckets.to_string());
        put("model.width", self.model.width.to_string());
        put("model.time_features", self.model.time_features.to_string());
        if let Some(c) = &self.model.checkpoint {
            put("model.checkpoint", c.clone());
        }
        put("objective", enum_name(&self.objective));
        put("optim.lr", self.optim.lr.to_string());
        put("optim.momentum", self.optim.momentum.to_string());
        put("optim.steps", self.optim.steps.to_string());
        put("optim.batch", self.optim.batch.to_string());
        put("optim.lr_decay", enum_name(&self.optim.lr_decay));
        put("train.log_every", self.train.log_every.to_string());
        put("train.log_wall_clock", self.train.log_wall_clock.to_string());
        put("sampler.scheme", enum_name(&self.sampler.scheme));
        put("sampler.steps", self.sampler.steps.to_string());
        put("sampler.samples", self.sampler.samples.to_string());
        put("dataset.kind", enum_name(&self.dataset.kind));
        put("dataset.probs", fmt_list(&self.dataset.probs));
        put("dataset.transition", fmt_list(&self.dataset.transition));
        put("self_correct.temperature", self.self_correct.temperature.to_string());
        put("self_correct.max_updates", self.self_correct.max_updates.to_string());
        put("self_correct.noise_level", self.self_correct.noise_level.to_string());
        if let Some(p) = &self.self_correct.input {
            put("self_correct.input", p.clone());
        }
        put("simulate.paths", self.simulate.paths.to_string());
        put("simulate.x0", self.simulate.x0.to_string());
        if let Some(t) = self.simulate.t_end {
            put("simulate.t_end", t.to_string());
        }
        put("export.times", fmt_list(&self.export.times));
        if let Some(f) = &self.verify.inject_fault {
            put("verify.inject_fault", f.clone());
        }
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Parse("a seed is required (config key `seed` or --seed)".into()))
    }

    pub fn eps(&self) -> f64 {
        self.schedule.eps.unwrap_or(DEFAULT_EPS_FRACTION * self.schedule.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = Some(42);
        c.dataset.probs = vec![0.25, 0.75];
        c.model.checkpoint = Some("m.ckpt".into());
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = ExperimentConfig::parse("# header\n\nseed = 3  # trailing\nsampler.scheme = euler\n").unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.sampler.scheme, Scheme::Euler);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(ExperimentConfig::parse("colour = red\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(ExperimentConfig::parse("objective = mse\n").is_err());
        assert!(ExperimentConfig::parse("just words\n").is_err());
    }
}

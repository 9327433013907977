//! The training loop: sample `x0 ~ p_data`, `t ~ U(eps, T - eps)`,
//! `x_t ~ q_{t|0}`, evaluate the configured loss and take a momentum step.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LrDecay};
use super::data::ToyDataset;
use crate::ctmc::{Schedule, ScheduleKind};
use crate::error::{domain, Error, Result};
use crate::model::{Mlp, MlpSpec, Momentum, ParamModel, Tabular, Trainable, Variant};
use crate::objectives::{sequence_loss, LossBreakdown};
use crate::rng::{categorical, open_unit, pairwise_sum, stream, SimRng};

/// Stream reserved for parameter initialisation; batch items use
/// `step * batch + k`.
pub const INIT_STREAM: u64 = u64::MAX;

/// Value of [`MetricsRecord::loss_scale`].
pub const LOSS_SCALE: &str = "integrated";

/// One line of the metrics stream, averaged over the batches of a logging
/// interval. Losses are integrated over `[eps, T - eps]`, i.e. the per-sample
/// mean times `T - 2 eps`; `loss_scale` says so in every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_scale: String,
    pub loss: f64,
    pub poisson: f64,
    pub direction: f64,
    pub constant: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

/// Written as the last metrics line when training aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub abort: String,
    pub step: usize,
    pub batch_index: usize,
    pub x0: Vec<usize>,
    pub t: f64,
    pub x_t: Vec<usize>,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ParamModel,
    pub records: Vec<MetricsRecord>,
    /// Per-step batch-mean loss (integrated scale).
    pub step_losses: Vec<f64>,
}

/// Schedule, dataset and freshly initialised model described by `config`.
pub struct Setup {
    pub schedule: Schedule,
    pub dataset: ToyDataset,
    pub model: ParamModel,
}

pub fn setup(config: &ExperimentConfig) -> Result<Setup> {
    let seed = config.seed()?;
    let schedule = config.schedule.build()?;
    let dataset = ToyDataset::from_spec(&config.dataset, config.model.seq_len)?;
    let usable = match schedule.kind() {
        ScheduleKind::Uniform => schedule.num_states(),
        ScheduleKind::Masked => schedule.num_states() - 1,
    };
    if dataset.vocab() > usable {
        return Err(domain(format!(
            "dataset uses {} token values but the schedule offers {usable}",
            dataset.vocab()
        )));
    }
    let model = init_model(config, &schedule, seed)?;
    Ok(Setup { schedule, dataset, model })
}

pub fn init_model(config: &ExperimentConfig, schedule: &Schedule, seed: u64) -> Result<ParamModel> {
    let mut rng = stream(seed, INIT_STREAM);
    let (s, l, t) = (schedule.num_states(), config.model.seq_len, schedule.horizon());
    Ok(match config.model.variant {
        Variant::Tabular => ParamModel::Tabular(Tabular::new(s, l, config.model.buckets, t, &mut rng)?),
        Variant::Mlp => {
            let spec = MlpSpec {
                width: config.model.width,
                time_features: config.model.time_features,
                ..MlpSpec::new(s, l, t)
            };
            ParamModel::Mlp(Mlp::new(spec, &mut rng)?)
        }
    })
}

fn learning_rate(config: &ExperimentConfig, step: usize) -> f64 {
    match config.optim.lr_decay {
        LrDecay::None => config.optim.lr,
        LrDecay::Cosine => {
            let u = step as f64 / config.optim.steps.max(1) as f64;
            0.5 * config.optim.lr * (1.0 + (std::f64::consts::PI * u).cos())
        }
    }
}

struct Item {
    loss: LossBreakdown,
    grad: Vec<f64>,
    x0: Vec<usize>,
    t: f64,
    x_t: Vec<usize>,
}

fn draw_item(
    schedule: &Schedule,
    dataset: &ToyDataset,
    config: &ExperimentConfig,
    model: &ParamModel,
    rng: &mut SimRng,
) -> Result<Item> {
    let x0 = dataset.sample(rng);
    let (lo, hi) = (schedule.lower_time(), schedule.upper_time());
    let t = lo + (hi - lo) * open_unit(rng);
    let x_t = x0
        .iter()
        .map(|&a| {
            let k = schedule.forward_kernel(t, a)?;
            categorical(rng, &k).ok_or_else(|| domain("empty forward kernel"))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, head_grad) = sequence_loss(config.objective, schedule, model, &x0, t, &x_t)?;
    let grad = if loss.is_finite() {
        model.backward(&x_t, t, &head_grad)?
    } else {
        Vec::new()
    };
    Ok(Item { loss, grad, x0, t, x_t })
}

/// Elementwise sum of equal-length vectors, reduced pairwise in index order.
fn pairwise_vec_sum(items: &[Vec<f64>]) -> Vec<f64> {
    match items.len() {
        0 => Vec::new(),
        1 => items[0].clone(),
        n => {
            let (a, b) = items.split_at(n / 2);
            let mut left = pairwise_vec_sum(a);
            let right = pairwise_vec_sum(b);
            left.iter_mut().zip(&right).for_each(|(x, y)| *x += y);
            left
        }
    }
}

fn write_json_line<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(out, "{line}")?;
    Ok(())
}

/// Runs the configured number of steps, streaming metrics as JSON lines.
/// A non-finite loss writes an [`AbortRecord`] and returns an error.
pub fn train(config: &ExperimentConfig, metrics: &mut dyn Write) -> Result<TrainOutcome> {
    let seed = config.seed()?;
    let Setup { schedule, dataset, mut model } = setup(config)?;
    let batch = config.optim.batch;
    if batch == 0 || config.train.log_every == 0 {
        return Err(domain("optim.batch and train.log_every must be positive"));
    }
    let mut opt = Momentum::new(model.params().len(), config.optim.lr, config.optim.momentum);
    let scale = schedule.upper_time() - schedule.lower_time();
    let started = Instant::now();
    let mut records = Vec::new();
    let mut step_losses = Vec::with_capacity(config.optim.steps);
    let mut interval = LossBreakdown::default();
    let mut interval_steps = 0usize;

    for step in 0..config.optim.steps {
        let items: Vec<Item> = (0..batch)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream(seed, (step * batch + k) as u64);
                draw_item(&schedule, &dataset, config, &model, &mut rng)
            })
            .collect::<Result<_>>()?;

        if let Some((k, bad)) = items.iter().enumerate().find(|(_, it)| !(it.loss.is_finite() && it.loss.total.is_finite())) {
            let rec = AbortRecord {
                abort: "non-finite loss".into(),
                step,
                batch_index: k,
                x0: bad.x0.clone(),
                t: bad.t,
                x_t: bad.x_t.clone(),
                loss: sanitize(bad.loss),
            };
            write_json_line(metrics, &rec)?;
            return Err(Error::NonFinite(format!("loss at step {step}, batch item {k}")));
        }

        let n = batch as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| pairwise_sum(&items.iter().map(|it| f(&it.loss)).collect::<Vec<_>>()) / n;
        let step_loss = LossBreakdown {
            poisson: mean(|l| l.poisson),
            direction: mean(|l| l.direction),
            constant: mean(|l| l.constant),
            total: mean(|l| l.total),
            unsupported: None,
        }
        .scaled(scale);
        step_losses.push(step_loss.total);
        interval += step_loss;
        interval_steps += 1;

        let lr = learning_rate(config, step);
        if lr != 0.0 {
            let grads: Vec<Vec<f64>> = items.into_iter().map(|it| it.grad).collect();
            let mut g = pairwise_vec_sum(&grads);
            g.iter_mut().for_each(|x| *x /= n);
            opt.step_with_lr(model.params_mut(), &g, lr);
        }

        if (step + 1) % config.train.log_every == 0 || step + 1 == config.optim.steps {
            let avg = interval.scaled(1.0 / interval_steps as f64);
            let rec = MetricsRecord {
                step: step + 1,
                loss_scale: LOSS_SCALE.into(),
                loss: avg.total,
                poisson: avg.poisson,
                direction: avg.direction,
                constant: avg.constant,
                lr,
                wall_clock_s: config.train.log_wall_clock.then(|| started.elapsed().as_secs_f64()),
            };
            write_json_line(metrics, &rec)?;
            records.push(rec);
            interval = LossBreakdown::default();
            interval_steps = 0;
        }
    }
    Ok(TrainOutcome { model, records, step_losses })
}

// JSON has no infinities; keep the record parseable.
fn sanitize(mut l: LossBreakdown) -> LossBreakdown {
    for v in [&mut l.poisson, &mut l.direction, &mut l.constant, &mut l.total] {
        if !v.is_finite() {
            *v = f64::MAX.copysign(*v);
        }
    }
    l
}

/// Summary CSV with one row per metrics record.
pub fn write_summary(records: &[MetricsRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,loss,poisson,direction,constant,lr")?;
    for r in records {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.step, r.loss, r.poisson, r.direction, r.constant, r.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seed = Some(seed);
        c.optim.steps = 200;
        c.optim.batch = 16;
        c.model.buckets = 8;
        c.train.log_every = 50;
        c
    }

    #[test]
    fn metrics_are_json_lines() {
        let mut buf = Vec::new();
        let out = train(&small(1), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, out.records);
        assert_eq!(parsed.len(), 4);
        assert!(parsed.iter().all(|r| r.wall_clock_s.is_none()));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut c = small(5);
        c.optim.lr = 0.0;
        let init = setup(&c).unwrap().model;
        let out = train(&c, &mut Vec::new()).unwrap();
        let a: Vec<u64> = init.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = out.model.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let c = small(11);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut buf = Vec::new();
                let out = train(&c, &mut buf).unwrap();
                (buf, out.model)
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn missing_seed_is_an_error() {
        let mut c = small(0);
        c.seed = None;
        assert!(train(&c, &mut Vec::new()).is_err());
    }
}

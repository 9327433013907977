//! Verification suites and their JSON report.
//!
//! Every suite is deterministic given [`VerifyOptions::seed`]; the report
//! carries measured values and tolerances for each check.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LrDecay};
use super::train::train;
use crate::ctmc::{AlphaFamily, ExitJump, ForwardRate, ReverseTarget, Schedule};
use crate::error::{domain, Error, Result};
use crate::model::{write_checkpoint, MaskedAdapter, Mlp, MlpSpec, ParamModel, Tabular, Trainable, TwoHead};
use crate::objectives::{
    bregman_density, categorical_kl, compute_gap, decompose_row_kl, elbo, exact_expected_loss, exact_l_kl_grad,
    exact_marginal_kl_grad, loss_cond_stable, mdlm_loss, poisson_kl, sequence_loss, LossKind, DEFAULT_QUAD_POINTS,
};
use crate::oracle::{
    exact_nll_small_chain, finite_difference_gradient, integrate_master_equation, interval_optimal_head, ExactReverse, ExactSequenceReverse,
};
use crate::path::{campbell_mecke_check, gillespie_batch, TimeReversed};
use crate::rng::{categorical, stream, SimRng};
use crate::samplers::{
    histogram, recover_clean, sample_batch, self_correct, total_variation, SamplerConfig, Scheme, SelfCorrectConfig,
};

pub const REPORT_SCHEMA: &str = "ctmc-verify/1";

pub const DEFAULT_SEED: u64 = 20_240_917;

/// Suites run when none are named.
pub const DEFAULT_SUITES: &[&str] = &[
    "decomposition",
    "mdlm",
    "loss_family",
    "elbo",
    "self_correction",
    "gradients",
    "determinism",
];

/// Every suite, in report order.
pub const ALL_SUITES: &[&str] = &[
    "decomposition",
    "mdlm",
    "loss_family",
    "elbo",
    "forward",
    "reverse",
    "samplers",
    "learning",
    "self_correction",
    "gradients",
    "determinism",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// `None` when the measured value was not finite.
    pub measured: Option<f64>,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Parses and validates a report: schema tag, and pass flags consistent
    /// with the checks they summarize.
    pub fn parse(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("verify report: {e}")))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Parse(format!("unknown report schema `{}`", r.schema)));
        }
        for s in &r.suites {
            if s.name.is_empty() || s.checks.iter().any(|c| c.name.is_empty()) {
                return Err(Error::Parse("empty suite or check name".into()));
            }
            if s.passed != s.checks.iter().all(|c| c.passed) {
                return Err(Error::Parse(format!("suite `{}` pass flag disagrees with its checks", s.name)));
            }
            if s.checks.iter().any(|c| c.measured.is_none() && c.passed) {
                return Err(Error::Parse(format!("suite `{}` passes a non-finite measurement", s.name)));
            }
        }
        if r.passed != r.suites.iter().all(|s| s.passed) {
            return Err(Error::Parse("overall pass flag disagrees with the suites".into()));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Name of a suite whose identity is perturbed by `1e-6`.
    pub inject_fault: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: DEFAULT_SEED, inject_fault: None }
    }
}

impl VerifyOptions {
    fn fault(&self, suite: &str) -> f64 {
        if self.inject_fault.as_deref() == Some(suite) {
            1e-6
        } else {
            0.0
        }
    }
}

/// Runs the named suites (the default set when `names` is empty).
pub fn run_verify(names: &[String], options: &VerifyOptions) -> Result<VerifyReport> {
    let selected: Vec<&str> = if names.is_empty() {
        DEFAULT_SUITES.to_vec()
    } else if names.iter().any(|n| n == "all") {
        ALL_SUITES.to_vec()
    } else {
        let mut seen = BTreeSet::new();
        for n in names {
            if !ALL_SUITES.contains(&n.as_str()) {
                return Err(Error::Parse(format!("unknown suite `{n}` (known: {})", ALL_SUITES.join(", "))));
            }
            seen.insert(n.as_str());
        }
        ALL_SUITES.iter().copied().filter(|s| seen.contains(s)).collect()
    };
    let suites = selected.iter().map(|s| run_suite(s, options)).collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        schema: REPORT_SCHEMA.into(),
        seed: options.seed,
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

pub fn run_suite(name: &str, options: &VerifyOptions) -> Result<SuiteReport> {
    let checks = match name {
        "decomposition" => decomposition(options)?,
        "mdlm" => mdlm(options)?,
        "loss_family" => loss_family(options)?,
        "elbo" => elbo_validity(options)?,
        "forward" => forward(options)?,
        "reverse" => reverse(options)?,
        "samplers" => samplers(options)?,
        "learning" => learning(options)?,
        "self_correction" => self_correction(options)?,
        "gradients" => gradients(options)?,
        "determinism" => determinism(options)?,
        other => return Err(Error::Parse(format!("unknown suite `{other}`"))),
    };
    Ok(SuiteReport { name: name.into(), passed: checks.iter().all(|c| c.passed), checks })
}

fn check(name: &str, measured: f64, tolerance: f64, passed: bool, detail: impl Into<String>) -> Check {
    let finite = measured.is_finite();
    Check {
        name: name.into(),
        passed: passed && finite,
        measured: finite.then_some(measured),
        tolerance,
        detail: detail.into(),
    }
}

/// Passes when `measured <= tolerance`.
fn at_most(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Check {
    check(name, measured, tolerance, measured <= tolerance, detail)
}

/// Passes when `measured >= tolerance`.
fn at_least(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Check {
    check(name, measured, tolerance, measured >= tolerance, detail)
}

fn random_dist<R: Rng>(rng: &mut R, n: usize, skip: Option<usize>) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|j| if Some(j) == skip { 0.0 } else { rng.random_range(0.01..1.0) })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn decomposition(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const ROWS: usize = 10_000;
    let fault = opts.fault("decomposition");
    let mut rng = stream(opts.seed, 1);
    let mut worst: f64 = 0.0;
    let mut worst_breakdown: f64 = 0.0;
    for _ in 0..ROWS {
        let s = rng.random_range(2..=16);
        let i = rng.random_range(0..s);
        let per_pair: Vec<f64> = (0..s)
            .map(|j| if j == i || rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.01..3.0) })
            .collect();
        let target = ReverseTarget::from_per_pair(i, per_pair);
        let model = ExitJump { exit_rate: rng.random_range(0.05..5.0), jump_dist: random_dist(&mut rng, s, Some(i)) };
        let mut lhs = 0.0;
        for j in (0..s).filter(|&j| j != i) {
            lhs += bregman_density(target.per_pair[j], model.rate_to(j))?;
        }
        let cat = if target.exit_rate > 0.0 {
            target.exit_rate * categorical_kl(&target.jump_dist, &model.jump_dist)?.value()
        } else {
            0.0
        };
        let rhs = poisson_kl(target.exit_rate, model.exit_rate)? + cat + fault;
        worst = worst.max((lhs - rhs).abs());
        let b = decompose_row_kl(&target, &model)?;
        worst_breakdown = worst_breakdown.max((b.total - lhs).abs()).max((b.poisson + b.direction - b.total).abs());
    }
    Ok(vec![
        at_most("poisson_plus_categorical", worst, 1e-12, format!("max abs error over {ROWS} rows, S in 2..=16")),
        at_most("breakdown_consistency", worst_breakdown, 1e-12, "decompose_row_kl total against the direct sum"),
    ])
}

fn mdlm(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const TUPLES: usize = 1000;
    let fault = opts.fault("mdlm");
    let mut rng = stream(opts.seed, 2);
    let mut worst: f64 = 0.0;
    let mut worst_unmasked: f64 = 0.0;
    for k in 0..TUPLES {
        let vocab = rng.random_range(2..=8);
        let family = if k % 2 == 0 { AlphaFamily::Linear } else { AlphaFamily::Cosine };
        let s = Schedule::masked(vocab + 1, family, 1.0)?;
        let x0 = rng.random_range(0..vocab);
        let t = rng.random_range(s.lower_time()..s.upper_time());
        let x_t = categorical(&mut rng, &s.forward_kernel(t, x0)?).ok_or_else(|| domain("empty kernel"))?;
        let x_theta = random_dist(&mut rng, vocab, None);
        let probs = x_theta.clone();
        let adapter = MaskedAdapter::new(&s, 1, move |_: &[usize], _| Ok(vec![probs.clone()]))?;
        let ours = loss_cond_stable(&s, &adapter, x0, t, x_t)?.total + fault;
        let reference = mdlm_loss(&s, t, x0, x_t, &x_theta)?;
        let err = (ours - reference).abs();
        if x_t == vocab {
            worst = worst.max(err);
        } else {
            worst_unmasked = worst_unmasked.max(err);
        }
    }
    Ok(vec![
        at_most("masked_tokens", worst, 1e-10, format!("|cond_stable - mdlm| over masked draws of {TUPLES} tuples")),
        at_most("unmasked_tokens", worst_unmasked, 1e-10, "draws with x_t != mask contribute zero to both"),
    ])
}

fn two_point() -> Vec<f64> {
    vec![0.7, 0.3, 0.0]
}

fn random_tabulars(s: usize, count: usize, seed: u64) -> Result<Vec<Tabular>> {
    (0..count).map(|k| Tabular::new(s, 1, 8, 1.0, &mut stream(seed, 100 + k as u64))).collect()
}

fn loss_family(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let fault = opts.fault("loss_family");
    let schedule = Schedule::uniform(3, AlphaFamily::Linear, 1.0)?;
    let p = vec![0.5, 0.3, 0.2];
    let models = random_tabulars(3, 5, opts.seed)?;
    let q = DEFAULT_QUAD_POINTS;

    let offsets = models
        .iter()
        .map(|m| {
            Ok(exact_expected_loss(LossKind::Kl, &schedule, &p, m, q)?
                - exact_expected_loss(LossKind::Conditional, &schedule, &p, m, q)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let spread = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
    let offset_spread = spread(&offsets) + fault;

    let mut grad_err: f64 = 0.0;
    for m in &models {
        let (_, a) = exact_l_kl_grad(&schedule, &p, m, q)?;
        let (_, b) = exact_marginal_kl_grad(&schedule, &p, m, q)?;
        let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        grad_err = grad_err.max(diff / norm);
    }

    let mut gaps = Vec::new();
    let mut min_gap = f64::INFINITY;
    let mut identity_err: f64 = 0.0;
    let two = two_point();
    for m in &models {
        let g = compute_gap(&schedule, &two, m, q)?;
        min_gap = min_gap.min(g.c_gap);
        gaps.push(g.l_kl_value - g.marginal_kl_value);
        identity_err = identity_err.max((g.l_kl_value - g.marginal_kl_value - g.c_gap).abs());
    }
    let mut delta_gap: f64 = 0.0;
    for x0 in 0..3 {
        let mut d = vec![0.0; 3];
        d[x0] = 1.0;
        for m in &models {
            delta_gap = delta_gap.max(compute_gap(&schedule, &d, m, q)?.c_gap.abs());
        }
    }
    Ok(vec![
        at_most("kl_minus_conditional_constant", offset_spread, 1e-9, "spread of L_KL - L_cond over 5 tabular models"),
        at_most("exact_gradients_agree", grad_err, 1e-6, "relative L2 error of grad L_KL against grad KL(Q_hat || P)"),
        at_least("gap_nonnegative", min_gap, -1e-10, "smallest c_gap over 5 models, two-point data"),
        at_most("gap_parameter_invariant", spread(&gaps), 1e-8, "spread of L_KL - KL over 5 models"),
        at_most("gap_matches_pair_deltas", identity_err, 1e-8, "L_KL - KL against the summed Jensen gaps"),
        at_most("gap_zero_for_delta_data", delta_gap, 1e-12, "largest |c_gap| for point-mass data"),
    ])
}

fn elbo_validity(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let fault = opts.fault("elbo");
    let schedule = Schedule::uniform(2, AlphaFamily::Linear, 1.0)?;
    let mut models: Vec<ParamModel> = random_tabulars(2, 16, opts.seed)?.into_iter().map(ParamModel::Tabular).collect();
    for k in 0..4 {
        let spec = MlpSpec { width: 16, time_features: 4, ..MlpSpec::new(2, 1, 1.0) };
        let mut m = Mlp::new(spec, &mut stream(opts.seed, 200 + k))?;
        perturb(m.params_mut(), &mut stream(opts.seed, 300 + k), 0.3);
        models.push(ParamModel::Mlp(m));
    }
    let margins = models
        .par_iter()
        .map(|m| {
            let mut worst = f64::INFINITY;
            for x0 in 0..2 {
                let bound = elbo(&schedule, m, x0)?.total;
                let nll = exact_nll_small_chain(&schedule, m, x0, 10_000)?;
                worst = worst.min(bound - nll - fault);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    let margin = margins.into_iter().fold(f64::INFINITY, f64::min);
    Ok(vec![at_least("elbo_bounds_nll", margin, -1e-6, "min over 20 models and both x0 of ELBO - exact NLL")])
}

fn perturb(params: &mut [f64], rng: &mut SimRng, width: f64) {
    for p in params {
        *p += rng.random_range(-width..width);
    }
}

fn forward(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const PATHS: usize = 100_000;
    let fault = opts.fault("forward");
    let mut checks = Vec::new();
    for (label, schedule) in [
        ("uniform", Schedule::uniform(4, AlphaFamily::Linear, 1.0)?),
        ("masked", Schedule::masked(4, AlphaFamily::Cosine, 1.0)?),
    ] {
        let rate = ForwardRate::new(&schedule);
        let (x0, t_end) = (1, 0.5);
        let kernel = schedule.forward_kernel(t_end, x0)?;
        let paths = gillespie_batch(&rate, |_| x0, 0.0, t_end, PATHS, opts.seed ^ 5)?;
        let mut h = vec![0.0; 4];
        for p in &paths {
            h[p.final_state()] += 1.0 / PATHS as f64;
        }
        checks.push(at_most(
            &format!("gillespie_marginal_{label}"),
            total_variation(&h, &kernel) + fault,
            0.01,
            format!("TV at t = {t_end} over {PATHS} paths"),
        ));
        let mut q0 = vec![0.0; 4];
        q0[x0] = 1.0;
        let master = integrate_master_equation(&rate, &q0, 0.0, t_end, 1e-3)?;
        checks.push(at_most(
            &format!("master_equation_{label}"),
            total_variation(&master.q, &kernel) + fault,
            1e-6,
            "TV of RK4 solution against the closed-form kernel",
        ));
        let cm = campbell_mecke_check(&rate, &schedule, x0, t_end, |t, a, b| (1.0 + t) * (1 + a + 2 * b) as f64, PATHS, opts.seed ^ 6)?;
        let z = (cm.mc_estimate - cm.analytic).abs() / cm.std_error;
        checks.push(at_most(
            &format!("campbell_mecke_{label}"),
            z + fault,
            3.0,
            format!("|MC - quadrature| in standard errors (MC {:.6}, quadrature {:.6})", cm.mc_estimate, cm.analytic),
        ));
    }
    Ok(checks)
}

fn reverse(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const PATHS: usize = 100_000;
    let fault = opts.fault("reverse");
    let schedule = Schedule::uniform(3, AlphaFamily::Linear, 1.0)?;
    let p = two_point();
    let exact = crate::ctmc::MarginalReverseRate::new(&schedule, &p)?;
    let rev = TimeReversed { inner: exact, horizon: schedule.horizon() };
    // reverse time s = T - t runs from eps to T - eps
    let pi = schedule.pi().to_vec();
    let paths = gillespie_batch(
        &rev,
        |rng| categorical(rng, &pi).expect("pi is a distribution"),
        schedule.lower_time(),
        schedule.upper_time(),
        PATHS,
        opts.seed ^ 7,
    )?;
    let mut h = vec![0.0; 3];
    for path in &paths {
        h[path.final_state()] += 1.0 / PATHS as f64;
    }
    Ok(vec![at_most(
        "exact_reverse_recovers_data",
        total_variation(&h, &p) + fault,
        0.02,
        format!("TV to p_data after simulating from pi over {PATHS} paths"),
    )])
}

/// Histogram, TV to `p` and a standard error for that TV,
/// `0.5 sqrt(sum_k h_k (1 - h_k) / n)`.
fn tv_with_error(samples: &[Vec<usize>], p: &[f64]) -> (Vec<f64>, f64, f64) {
    let h = histogram(samples, p.len());
    let n = samples.len() as f64;
    let se = 0.5 * (h.iter().map(|v| v * (1.0 - v)).sum::<f64>() / n).sqrt();
    let tv = total_variation(&h, p);
    (h, tv, se)
}

fn samplers(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const SAMPLES: usize = 100_000;
    let fault = opts.fault("samplers");
    let schedule = Schedule::uniform(3, AlphaFamily::Linear, 1.0)?;
    let p = two_point();
    let model = ExactReverse::new(&schedule, &p)?;
    let mut checks = Vec::new();
    let mut fine = Vec::new();
    for (tag, label, scheme) in [(0u64, "tau", Scheme::TauLeaping), (1 << 32, "euler", Scheme::Euler)] {
        let mut prev: Option<(usize, f64, f64)> = None;
        let mut worst_increase = f64::NEG_INFINITY;
        for steps in [16, 64, 256] {
            let cfg = SamplerConfig::new(&schedule, scheme, steps, opts.seed ^ tag ^ steps as u64);
            let (xs, _) = sample_batch(&model, &schedule, &cfg, SAMPLES)?;
            let (_, tv, se) = tv_with_error(&xs, &p);
            if let Some((_, tv0, se0)) = prev {
                // excess increase beyond two combined standard errors
                worst_increase = worst_increase.max(tv - tv0 - 2.0 * (se * se + se0 * se0).sqrt());
            }
            prev = Some((steps, tv, se));
            if steps == 256 {
                checks.push(at_most(&format!("{label}_tv_at_256"), tv + fault, 0.05, format!("TV to p_data over {SAMPLES} samples")));
            }
        }
        checks.push(at_most(
            &format!("{label}_tv_monotone"),
            worst_increase + fault,
            0.0,
            "largest TV increase between N = 16, 64, 256 beyond 2 standard errors",
        ));
        let cfg = SamplerConfig::new(&schedule, scheme, 1024, opts.seed ^ tag ^ 1024);
        let (xs, _) = sample_batch(&model, &schedule, &cfg, SAMPLES)?;
        let (_, tv, se) = tv_with_error(&xs, &p);
        fine.push((tv, se));
    }
    let ((tv_a, se_a), (tv_b, se_b)) = (fine[0], fine[1]);
    let z = (tv_a - tv_b).abs() / (se_a * se_a + se_b * se_b).sqrt();
    checks.push(at_most(
        "tau_euler_agree_at_1024",
        z + fault,
        2.0,
        format!("|TV_tau - TV_euler| in combined standard errors (TV {tv_a:.5} vs {tv_b:.5})"),
    ));
    Ok(checks)
}

/// Configuration used by the `learning` suite.
pub fn learning_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = Some(seed);
    c.dataset.probs = two_point();
    c.model.buckets = 64;
    c.optim.steps = 50_000;
    c.optim.batch = 256;
    c.optim.lr = 0.04;
    c.optim.lr_decay = LrDecay::Cosine;
    c.train.log_every = 1000;
    c
}

/// The 20 `(t, state)` probes of the learning check: times spread over
/// `[0.1, 0.8] T`, states cycling through `0..3`.
pub fn learning_probes(horizon: f64) -> Vec<(f64, usize)> {
    (0..20).map(|k| ((0.1 + 0.7 * k as f64 / 19.0) * horizon, k % 3)).collect()
}

/// Largest relative exit-rate error and jump-distribution TV of a tabular
/// `model` at the learning probes, each against the optimum of the
/// probed `(bucket, state)` cell over the training time range.
pub fn probe_errors(model: &Tabular, schedule: &Schedule, p_data: &[f64]) -> Result<(f64, f64)> {
    let width = schedule.horizon() / model.buckets() as f64;
    let mut lam_err: f64 = 0.0;
    let mut tv_err: f64 = 0.0;
    for (t, i) in learning_probes(schedule.horizon()) {
        let b = model.bucket(t) as f64;
        let lo = (b * width).max(schedule.lower_time());
        let hi = ((b + 1.0) * width).min(schedule.upper_time());
        let truth = interval_optimal_head(schedule, p_data, lo, hi, i)?;
        let head = model.head(t, i)?;
        lam_err = lam_err.max((head.exit_rate - truth.exit_rate).abs() / truth.exit_rate);
        tv_err = tv_err.max(total_variation(&head.jump_dist, &truth.jump_dist));
    }
    Ok((lam_err, tv_err))
}

fn learning(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let fault = opts.fault("learning");
    let config = learning_config(opts.seed);
    let schedule = config.schedule.build()?;
    let out = train(&config, &mut std::io::sink())?;
    let ParamModel::Tabular(model) = &out.model else {
        return Err(domain("learning check needs the tabular model"));
    };
    let (lam, tv) = probe_errors(model, &schedule, &config.dataset.probs)?;
    let n = out.step_losses.len();
    let tenth = (n / 10).max(1);
    let first = out.step_losses[..tenth].iter().sum::<f64>() / tenth as f64;
    let last = out.step_losses[n - tenth..].iter().sum::<f64>() / tenth as f64;
    Ok(vec![
        at_most("exit_rate_relative_error", lam + fault, 0.05, "max over 20 probes of |lambda - lambda_hat| / lambda_hat"),
        at_most("jump_distribution_tv", tv + fault, 0.02, "max over 20 probes of TV(r, r_hat)"),
        check(
            "loss_decreases",
            last - first,
            0.0,
            last < first,
            format!("mean loss over the last tenth ({last:.6}) minus the first tenth ({first:.6})"),
        ),
    ])
}

/// A codebook of `count` random sequences with pairwise Hamming distance
/// at least `min_distance`.
fn codebook(rng: &mut SimRng, count: usize, len: usize, states: usize, min_distance: usize) -> Vec<Vec<usize>> {
    let mut words: Vec<Vec<usize>> = Vec::new();
    while words.len() < count {
        let w: Vec<usize> = (0..len).map(|_| rng.random_range(0..states)).collect();
        if words.iter().all(|v| v.iter().zip(&w).filter(|(a, b)| a != b).count() >= min_distance) {
            words.push(w);
        }
    }
    words
}

fn self_correction(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const CASES: usize = 10_000;
    const TRIALS: usize = 1000;
    let fault = opts.fault("self_correction");
    let mut rng = stream(opts.seed, 9);
    let mut round_trip: f64 = 0.0;
    for k in 0..CASES {
        let s = rng.random_range(2..=8);
        let family = if k % 2 == 0 { AlphaFamily::Linear } else { AlphaFamily::Cosine };
        let schedule = Schedule::uniform(s, family, 1.0)?;
        let t = rng.random_range(0.05..0.95);
        let p0 = random_dist(&mut rng, s, None);
        let (a, b) = (schedule.alpha(t), schedule.beta(t));
        let q: Vec<f64> = p0.iter().map(|p| a * p + b / s as f64).collect();
        let i = rng.random_range(0..s);
        let slope = -schedule.alpha_prime(t);
        let head = ExitJump {
            exit_rate: slope * (1.0 - q[i]) / (s as f64 * a * q[i]),
            jump_dist: (0..s).map(|j| if j == i { 0.0 } else { q[j] / (1.0 - q[i]) }).collect(),
        };
        let rec = recover_clean(&head, &schedule, t, i)?;
        for j in 0..s {
            round_trip = round_trip.max((rec.p0_hat[j] - p0[j]).abs()).max((rec.q_tilde[j] - q[j]).abs());
        }
    }

    let schedule = Schedule::uniform(8, AlphaFamily::Linear, 1.0)?;
    let words = codebook(&mut stream(opts.seed, 10), 16, 8, 8, 4);
    let support: Vec<(Vec<usize>, f64)> = words.iter().map(|w| (w.clone(), 1.0 / 16.0)).collect();
    let model = ExactSequenceReverse::new(&schedule, support.clone())?;
    let config = SelfCorrectConfig { temperature: 0.1, max_updates: 4, noise_level: 0.25 };
    let outcomes = (0..TRIALS)
        .into_par_iter()
        .map(|k| -> Result<(bool, bool)> {
            let mut rng = stream(opts.seed ^ 0x5c, k as u64);
            let word = &words[rng.random_range(0..words.len())];
            let pos = rng.random_range(0..8);
            let mut x = word.clone();
            x[pos] = (word[pos] + rng.random_range(1..8)) % 8;
            let before = disagreements(&schedule, &support, &x, &x, config.noise_level);
            let out = self_correct(&model, &schedule, &x, &config, &mut rng)?;
            let after = disagreements(&schedule, &support, &x, &out.sequence, config.noise_level);
            Ok((out.sequence[pos] == word[pos], after <= before))
        })
        .collect::<Result<Vec<_>>>()?;
    let repaired = outcomes.iter().filter(|o| o.0).count() as f64 / TRIALS as f64;
    let not_worse = outcomes.iter().filter(|o| o.1).count() as f64 / TRIALS as f64;
    Ok(vec![
        at_most("recover_clean_round_trip", round_trip + fault, 1e-10, format!("max abs error over {CASES} encoded heads")),
        at_least("planted_corruption_repaired", repaired - fault, 0.9, "S = 8, L = 8, tau = 0.1, K = 4, t = 0.25"),
        at_least("disagreements_never_increase", not_worse - fault, 0.95, "fraction of trials not moving away from the posterior argmax"),
    ])
}

/// Positions where `x` differs from the per-position argmax of the exact
/// posterior `p(x0 | x_t = observed)`.
fn disagreements(schedule: &Schedule, support: &[(Vec<usize>, f64)], observed: &[usize], x: &[usize], t: f64) -> usize {
    let s = schedule.num_states();
    let weights: Vec<f64> = support
        .iter()
        .map(|(w, p)| p * w.iter().zip(observed).map(|(&a, &b)| schedule.kernel_prob(t, a, b)).product::<f64>())
        .collect();
    (0..x.len())
        .filter(|&l| {
            let mut m = vec![0.0; s];
            for ((w, _), wt) in support.iter().zip(&weights) {
                m[w[l]] += wt;
            }
            let best = (0..s).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap_or(0);
            x[l] != best
        })
        .count()
}

fn gradients(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const COORDS: usize = 50;
    let fault = opts.fault("gradients");
    let schedule = Schedule::uniform(3, AlphaFamily::Cosine, 1.0)?;
    let seq_len = 2;
    let mut rng = stream(opts.seed, 11);
    let batch: Vec<(Vec<usize>, f64, Vec<usize>)> = (0..64)
        .map(|_| {
            let x0: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..3)).collect();
            // Away from both ends the loss stays O(1) and differences keep their digits.
            let t = rng.random_range(0.05..0.95);
            let x_t = x0
                .iter()
                .map(|&a| categorical(&mut rng, &schedule.forward_kernel(t, a).expect("t in range")).expect("kernel"))
                .collect();
            (x0, t, x_t)
        })
        .collect();

    let mut tab = Tabular::new(3, seq_len, 16, 1.0, &mut stream(opts.seed, 12))?;
    perturb(tab.params_mut(), &mut stream(opts.seed, 13), 0.5);
    let spec = MlpSpec { width: 8, time_features: 4, ..MlpSpec::new(3, seq_len, 1.0) };
    let mut mlp = Mlp::new(spec, &mut stream(opts.seed, 14))?;
    perturb(mlp.params_mut(), &mut stream(opts.seed, 15), 0.3);
    let models = [("tabular", ParamModel::Tabular(tab)), ("mlp", ParamModel::Mlp(mlp))];

    let mut checks = Vec::new();
    for (label, model) in &models {
        for kind in [LossKind::CondStable, LossKind::Kl, LossKind::Conditional] {
            let batch_loss = |m: &ParamModel| -> Result<(f64, Vec<f64>)> {
                let mut total = 0.0;
                let mut grad = vec![0.0; m.params().len()];
                for (x0, t, x_t) in &batch {
                    let (l, g) = sequence_loss(kind, &schedule, m, x0, *t, x_t)?;
                    total += l.total;
                    m.backward_into(x_t, *t, &g, &mut grad)?;
                }
                Ok((total, grad))
            };
            let (_, analytic) = batch_loss(model)?;
            // Tabular gradients are sparse; probe coordinates the batch touches.
            let mut pool: Vec<usize> = (0..analytic.len())
                .filter(|&k| matches!(model, ParamModel::Mlp(_)) || analytic[k] != 0.0)
                .collect();
            let mut prng = stream(opts.seed, 16);
            let mut coords = Vec::new();
            while coords.len() < COORDS.min(pool.len()) {
                coords.push(pool.swap_remove(prng.random_range(0..pool.len())));
            }
            let mut probe = model.clone();
            let fd = finite_difference_gradient(
                |theta| {
                    probe.params_mut().copy_from_slice(theta);
                    Ok(batch_loss(&probe)?.0)
                },
                model.params(),
                &coords,
                1e-4,
            )?;
            let worst = coords
                .iter()
                .zip(&fd)
                .map(|(&k, &f)| (analytic[k] + fault - f).abs() / analytic[k].abs().max(f.abs()).max(1e-6))
                .fold(0.0, f64::max);
            let name = format!("{label}_{}", serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
            checks.push(at_most(&name, worst, 1e-4, format!("max relative error over {} coordinates", coords.len())));
            if coords.len() < COORDS {
                checks.push(check(&format!("{name}_coverage"), coords.len() as f64, COORDS as f64, false, "too few coordinates touched"));
            }
        }
    }
    Ok(checks)
}

fn determinism(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut config = ExperimentConfig::default();
    config.seed = Some(opts.seed);
    config.optim.steps = 300;
    config.optim.batch = 32;
    config.model.buckets = 16;
    config.train.log_every = 50;
    let schedule = config.schedule.build()?;

    let run = |threads: usize| -> Result<(Vec<u8>, Vec<u8>, Vec<Vec<usize>>)> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Simulation(e.to_string()))?;
        pool.install(|| {
            let mut metrics = Vec::new();
            let out = train(&config, &mut metrics)?;
            let mut ckpt = Vec::new();
            write_checkpoint(&out.model, &mut ckpt)?;
            let cfg = SamplerConfig::new(&schedule, Scheme::TauLeaping, 64, opts.seed);
            let (xs, _) = sample_batch(&out.model, &schedule, &cfg, 500)?;
            Ok((metrics, ckpt, xs))
        })
    };
    let a = run(1)?;
    let b = run(4)?;
    let c = run(4)?;
    let same = |x: bool| if x { 0.0 } else { 1.0 };
    let report = |o: &VerifyOptions| run_verify(&["decomposition".to_string()], o).map(|r| r.to_json());
    let r1 = report(&VerifyOptions { seed: opts.seed, inject_fault: None })?;
    let r2 = report(&VerifyOptions { seed: opts.seed, inject_fault: None })?;
    let fault = opts.fault("determinism");
    Ok(vec![
        at_most("train_metrics_identical", same(a.0 == b.0 && b.0 == c.0) + fault, 0.0, "1 vs 4 workers, repeated"),
        at_most("train_checkpoint_identical", same(a.1 == b.1 && b.1 == c.1) + fault, 0.0, "1 vs 4 workers, repeated"),
        at_most("samples_identical", same(a.2 == b.2 && b.2 == c.2) + fault, 0.0, "tau-leaping, 500 samples"),
        at_most("verify_report_identical", same(r1 == r2) + fault, 0.0, "decomposition suite run twice"),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_and_detects_tampering() {
        let r = run_verify(&["decomposition".into()], &VerifyOptions::default()).unwrap();
        assert!(r.passed);
        let back = VerifyReport::parse(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let tampered = r.to_json().replacen("\"passed\": true", "\"passed\": false", 1);
        assert!(VerifyReport::parse(&tampered).is_err());
    }

    #[test]
    fn injected_fault_fails_decomposition() {
        let opts = VerifyOptions { inject_fault: Some("decomposition".into()), ..Default::default() };
        let r = run_verify(&["decomposition".into()], &opts).unwrap();
        assert!(!r.passed);
        assert!(!r.suites[0].checks[0].passed);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_verify(&["nonsense".into()], &VerifyOptions::default()).is_err());
    }
}

//! `ctmcd`: simulate, train, sample, self-correct, verify and export.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctmc_diffusion::ctmc::{ForwardRate, Schedule};
use ctmc_diffusion::harness::config::ExperimentConfig;
use ctmc_diffusion::harness::train::{train, write_summary};
use ctmc_diffusion::harness::verify::{run_verify, VerifyOptions};
use ctmc_diffusion::harness::ToyDataset;
use ctmc_diffusion::model::{read_checkpoint, write_checkpoint, ParamModel, TwoHead};
use ctmc_diffusion::oracle::{exact_marginals, ExactSequenceReverse};
use ctmc_diffusion::path::gillespie_batch;
use ctmc_diffusion::rng::stream;
use ctmc_diffusion::samplers::{sample_batch, self_correct, SamplerConfig, Scheme, SelfCorrectConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ctmcd", version, about = "Exit-rate / jump-distribution discrete diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-process paths from `simulate.x0`, one record per line.
    Simulate(Common),
    /// Train a model; writes the checkpoint plus `.metrics.jsonl` and `.summary.csv` beside it.
    Train(Common),
    /// Generate sequences; writes token lines plus a `.json` sidecar.
    Sample(Common),
    /// Apply self-correction to sequences from `self_correct.input` (or fresh samples).
    SelfCorrect(Common),
    /// Run verification suites (the default set when none are named).
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suite names, or `all`.
        suites: Vec<String>,
    },
    /// Exact marginals and posteriors at `export.times` as CSV.
    ExportMarginals(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (stdout or a per-command default when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `optim.steps` for train and `sampler.steps` for sampling.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `sampler.scheme`.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Tau,
    Euler,
    Exact,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Tau => Scheme::TauLeaping,
            SchemeArg::Euler => Scheme::Euler,
            SchemeArg::Exact => Scheme::Exact,
        }
    }
}

/// Invalid configuration; reported like a command-line usage error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

struct Loaded {
    config: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    base: PathBuf,
}

fn load(common: &Common, needs_seed: bool) -> anyhow::Result<Loaded> {
    let (mut config, base) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let config = ExperimentConfig::parse(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
            (config, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    if let Some(scheme) = common.scheme {
        config.sampler.scheme = scheme.into();
    }
    if needs_seed && config.seed.is_none() {
        return Err(Usage("a seed is required: pass --seed or set `seed` in the config".into()).into());
    }
    Ok(Loaded { config, base })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn open_out(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn simulate(common: &Common) -> anyhow::Result<()> {
    let Loaded { config, .. } = load(common, true)?;
    let schedule = config.schedule.build()?;
    let t_end = config.simulate.t_end.unwrap_or(schedule.upper_time());
    let x0 = config.simulate.x0;
    let paths = gillespie_batch(&ForwardRate::new(&schedule), |_| x0, 0.0, t_end, config.simulate.paths, config.seed()?)?;
    let mut out = open_out(&common.out)?;
    for p in paths {
        writeln!(out, "{p}")?;
    }
    out.flush()?;
    Ok(())
}

fn run_train(common: &Common) -> anyhow::Result<()> {
    let Loaded { mut config, .. } = load(common, true)?;
    if let Some(steps) = common.steps {
        config.optim.steps = steps;
    }
    let ckpt_path = common.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let mut metrics = io::BufWriter::new(fs::File::create(sibling(&ckpt_path, ".metrics.jsonl"))?);
    let outcome = train(&config, &mut metrics)?;
    metrics.flush()?;
    write_summary(&outcome.records, io::BufWriter::new(fs::File::create(sibling(&ckpt_path, ".summary.csv"))?))?;
    let mut ckpt = io::BufWriter::new(fs::File::create(&ckpt_path)?);
    write_checkpoint(&outcome.model, &mut ckpt)?;
    ckpt.flush()?;
    Ok(())
}

/// The checkpointed model, or the exact reverse process of the configured
/// data when no checkpoint is set.
enum AnyModel<'a> {
    Trained(ParamModel),
    Exact(ExactSequenceReverse<'a>),
}

impl AnyModel<'_> {
    fn as_dyn(&self) -> &dyn TwoHead {
        match self {
            Self::Trained(m) => m,
            Self::Exact(m) => m,
        }
    }
}

fn model_for<'a>(config: &ExperimentConfig, base: &Path, schedule: &'a Schedule) -> anyhow::Result<AnyModel<'a>> {
    match &config.model.checkpoint {
        Some(p) => {
            let path = resolve(base, p);
            let file = fs::File::open(&path).with_context(|| format!("opening checkpoint {}", path.display()))?;
            let m = read_checkpoint(BufReader::new(file))?;
            if m.num_states() != schedule.num_states() {
                bail!("checkpoint has {} states, schedule has {}", m.num_states(), schedule.num_states());
            }
            Ok(AnyModel::Trained(m))
        }
        None => {
            let data = ToyDataset::from_spec(&config.dataset, config.model.seq_len)?;
            let support = data
                .support()
                .context("no model.checkpoint set and the dataset is not enumerable")?;
            Ok(AnyModel::Exact(ExactSequenceReverse::new(schedule, support)?))
        }
    }
}

fn token_line(x: &[usize]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn sample(common: &Common) -> anyhow::Result<()> {
    let Loaded { mut config, base } = load(common, true)?;
    if let Some(steps) = common.steps {
        config.sampler.steps = steps;
    }
    let schedule = config.schedule.build()?;
    let model = model_for(&config, &base, &schedule)?;
    let seed = config.seed()?;
    let cfg = SamplerConfig::new(&schedule, config.sampler.scheme, config.sampler.steps, seed);
    let (xs, stats) = sample_batch(model.as_dyn(), &schedule, &cfg, config.sampler.samples)?;
    let out_path = common.out.clone().unwrap_or_else(|| PathBuf::from("samples.txt"));
    let mut out = open_out(&Some(out_path.clone()))?;
    for x in &xs {
        writeln!(out, "{}", token_line(x))?;
    }
    out.flush()?;
    let sidecar = json!({
        "config": config.to_text(),
        "seed": seed,
        "scheme": config.sampler.scheme,
        "steps": config.sampler.steps,
        "samples": xs.len(),
        "model": if matches!(model, AnyModel::Trained(_)) { "checkpoint" } else { "exact_reverse" },
        "stats": stats,
    });
    fs::write(sibling(&out_path, ".json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

fn parse_tokens(text: &str) -> anyhow::Result<Vec<Vec<usize>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|t| t.parse().context("bad token")).collect())
        .collect()
}

fn correct(common: &Common) -> anyhow::Result<()> {
    let Loaded { config, base } = load(common, true)?;
    let schedule = config.schedule.build()?;
    let model = model_for(&config, &base, &schedule)?;
    let seed = config.seed()?;
    let inputs = match &config.self_correct.input {
        Some(p) => parse_tokens(&fs::read_to_string(resolve(&base, p))?)?,
        None => {
            let cfg = SamplerConfig::new(&schedule, config.sampler.scheme, config.sampler.steps, seed);
            sample_batch(model.as_dyn(), &schedule, &cfg, config.sampler.samples)?.0
        }
    };
    let sc = SelfCorrectConfig {
        temperature: config.self_correct.temperature,
        max_updates: config.self_correct.max_updates,
        noise_level: config.self_correct.noise_level,
    };
    let out_path = common.out.clone().unwrap_or_else(|| PathBuf::from("corrected.txt"));
    let mut out = open_out(&Some(out_path.clone()))?;
    let mut edits = 0usize;
    let mut skipped = 0usize;
    for (k, x) in inputs.iter().enumerate() {
        // stream index offset keeps correction draws apart from the sampling ones
        let mut rng = stream(seed, (1u64 << 40) + k as u64);
        let o = self_correct(model.as_dyn(), &schedule, x, &sc, &mut rng)?;
        edits += o.edits.len();
        skipped += o.diagnostics.len();
        writeln!(out, "{}", token_line(&o.sequence))?;
    }
    out.flush()?;
    let sidecar = json!({
        "config": config.to_text(),
        "seed": seed,
        "sequences": inputs.len(),
        "edits": edits,
        "degenerate_positions": skipped,
    });
    fs::write(sibling(&out_path, ".json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

fn verify(common: &Common, suites: &[String]) -> anyhow::Result<bool> {
    let Loaded { config, .. } = load(common, false)?;
    let mut opts = VerifyOptions { inject_fault: config.verify.inject_fault.clone(), ..Default::default() };
    if let Some(seed) = config.seed {
        opts.seed = seed;
    }
    let report = run_verify(suites, &opts).map_err(|e| Usage(e.to_string()))?;
    let mut out = open_out(&common.out)?;
    writeln!(out, "{}", report.to_json())?;
    out.flush()?;
    for s in &report.suites {
        eprintln!("{:<16} {}", s.name, if s.passed { "pass" } else { "FAIL" });
    }
    Ok(report.passed)
}

fn export(common: &Common) -> anyhow::Result<()> {
    let Loaded { config, .. } = load(common, false)?;
    let schedule = config.schedule.build()?;
    let data = ToyDataset::from_spec(&config.dataset, config.model.seq_len)?;
    let p = data.p_data(schedule.num_states())?;
    let table = exact_marginals(&schedule, &p, &config.export.times)?;
    let mut out = open_out(&common.out)?;
    out.write_all(table.to_csv().as_bytes())?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c).map(|_| true),
        Command::Train(c) => run_train(c).map(|_| true),
        Command::Sample(c) => sample(c).map(|_| true),
        Command::SelfCorrect(c) => correct(c).map(|_| true),
        Command::Verify { common, suites } => verify(common, suites),
        Command::ExportMarginals(c) => export(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

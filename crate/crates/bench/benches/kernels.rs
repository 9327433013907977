use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use ctmc_diffusion::ctmc::{marginal_reverse, AlphaFamily, ForwardRate, ReverseTarget, Schedule};
use ctmc_diffusion::harness::config::ExperimentConfig;
use ctmc_diffusion::harness::train::train;
use ctmc_diffusion::model::Tabular;
use ctmc_diffusion::objectives::{decompose_row_kl, exact_expected_loss, LossKind, DEFAULT_QUAD_POINTS};
use ctmc_diffusion::oracle::ExactReverse;
use ctmc_diffusion::path::gillespie_sample;
use ctmc_diffusion::rng::stream;
use ctmc_diffusion::samplers::{sample_one, SamplerConfig, Scheme};

const P_DATA: [f64; 3] = [0.7, 0.3, 0.0];

fn rows(c: &mut Criterion) {
    let s = 16;
    let target = ReverseTarget::from_per_pair(3, (0..s).map(|j| if j == 3 { 0.0 } else { 0.5 + j as f64 }).collect());
    let mut model = target.exit_jump();
    model.exit_rate *= 1.3;
    c.bench_function("decompose_row_kl/S=16", |b| b.iter(|| decompose_row_kl(black_box(&target), black_box(&model))));

    let schedule = Schedule::uniform(3, AlphaFamily::Cosine, 1.0).unwrap();
    c.bench_function("marginal_reverse/S=3", |b| b.iter(|| marginal_reverse(&schedule, &P_DATA, black_box(0.4), 1)));
}

fn simulation(c: &mut Criterion) {
    let schedule = Schedule::uniform(4, AlphaFamily::Linear, 1.0).unwrap();
    let fwd = ForwardRate::new(&schedule);
    let mut k = 0;
    c.bench_function("gillespie/forward S=4", |b| {
        b.iter(|| {
            k += 1;
            gillespie_sample(&fwd, 0, 0.0, schedule.upper_time(), &mut stream(1, k))
        })
    });

    let schedule = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
    let exact = ExactReverse::new(&schedule, &P_DATA).unwrap();
    let mut group = c.benchmark_group("sample/exact reverse");
    for (name, scheme) in [("tau N=256", Scheme::TauLeaping), ("euler N=256", Scheme::Euler)] {
        let cfg = SamplerConfig::new(&schedule, scheme, 256, 7);
        let mut k = 0;
        group.bench_function(name, |b| {
            b.iter(|| {
                k += 1;
                sample_one(&exact, &schedule, &cfg, k)
            })
        });
    }
    group.finish();
}

fn objectives(c: &mut Criterion) {
    let schedule = Schedule::uniform(3, AlphaFamily::Linear, 1.0).unwrap();
    let model = Tabular::new(3, 1, 64, 1.0, &mut stream(3, 0)).unwrap();
    c.bench_function("exact_expected_loss/cond_stable", |b| {
        b.iter(|| exact_expected_loss(LossKind::CondStable, &schedule, &P_DATA, &model, DEFAULT_QUAD_POINTS))
    });

    let mut config = ExperimentConfig::default();
    config.seed = Some(5);
    config.optim.steps = 100;
    config.train.log_every = 100;
    c.bench_function("train/100 steps batch 64", |b| {
        b.iter_batched(|| config.clone(), |cfg| train(&cfg, &mut std::io::sink()), BatchSize::SmallInput)
    });
}

criterion_group!(benches, rows, simulation, objectives);
criterion_main!(benches);

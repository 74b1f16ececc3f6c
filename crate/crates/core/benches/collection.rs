use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use turnwise::config::RunConfig;
use turnwise::optimizer::{objective_and_gradient, PgSample};
use turnwise::par::ExecMode;
use turnwise::policy::{sequence_log_prob_masked, PolicyParams, StateFeatures};
use turnwise::train::collector;
use turnwise::vocab::VOCAB_SIZE;

const MODES: [(&str, ExecMode); 2] = [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)];

fn bench_collect(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.warm_start.enabled = false;
    cfg.orchestrator.max_turns = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = PolicyParams::random(cfg.policy.state_dim, 0.05, &mut rng);
    let tasks: Vec<_> = (0..4)
        .map(|i| cfg.env.make_task(format!("bench-{i}"), i, cfg.orchestrator.max_turns))
        .collect();

    let mut group = c.benchmark_group("collect_batch");
    group.sample_size(10);
    for (name, mode) in MODES {
        cfg.run.exec = mode;
        let col = collector(&cfg);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(col.collect_batch(&tasks, &params, 7, 0).expect("collection")))
        });
    }
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = PolicyParams::random(cfg.policy.state_dim, 0.05, &mut rng);
    let batch: Vec<PgSample> = (0..512)
        .map(|i| {
            let features = StateFeatures::from_facts(&[format!("fact{}", i % 37)], cfg.policy.state_dim);
            let tokens: Vec<usize> = (0..40).map(|_| rng.random_range(0..VOCAB_SIZE)).collect();
            let include = vec![true; tokens.len()];
            let old_log_prob = sequence_log_prob_masked(&params, &features, &tokens, &include);
            PgSample {
                features,
                tokens,
                include,
                old_log_prob,
                advantage: rng.random_range(-1.0..1.0),
            }
        })
        .collect();

    let mut group = c.benchmark_group("gradient");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(objective_and_gradient(&params, Some(&params), &batch, &cfg.optimizer, mode)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_collect, bench_gradient);
criterion_main!(benches);

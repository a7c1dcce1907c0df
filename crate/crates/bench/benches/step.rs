use arl_core::data::generate_synthetic;
use arl_core::training::{train_supervised, MetricsSink, TrainState};
use arl_core::TrainConfig;
use criterion::{criterion_group, criterion_main, Criterion};

// Ten optimizer steps of a 5-way 1-shot episode, ArL against the plain
// relation network.
fn episode_steps(c: &mut Criterion) {
    let ds = generate_synthetic(7, 32, 30, 32).unwrap();
    let mut g = c.benchmark_group("train_10_steps");
    g.sample_size(10);
    let arl = TrainConfig {
        channels: 32,
        queries: 5,
        iterations: 10,
        ..TrainConfig::default()
    };
    for (name, cfg) in [("arl", arl.clone()), ("baseline", arl.as_baseline())] {
        let fresh = TrainState::<f32>::fresh(cfg.descriptor(&ds).unwrap(), 0).unwrap();
        g.bench_function(name, |b| {
            b.iter(|| train_supervised(&cfg, &ds, fresh.clone(), &mut MetricsSink::memory(cfg.log_every)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, episode_steps);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mosuq::mcdropout::mc_forward_batch;
use mosuq::metrics::{roc_auc, uce, EvalRecord};
use mosuq::net::{self, ForwardMode};
use mosuq::{
    gen_synthetic, init_params, mc_forward, nll_loss, rng, train, ArchConfig, GenConfig, MCConfig,
    TrainConfig,
};
use rayon::prelude::*;

fn forward_backward(c: &mut Criterion) {
    let params = init_params(&ArchConfig::default(), 1).unwrap();
    let x: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
    let mut rng = rng::stream(1, 2);
    c.bench_function("forward_backward/default_arch", |b| {
        b.iter(|| {
            let (pred, cache) = net::forward(
                &params,
                black_box(&x),
                ForwardMode::Dropout { p: 0.5 },
                &mut rng,
            )
            .unwrap();
            let l = nll_loss(&pred, 3.0);
            black_box(net::backward(&cache, &params, l.d_y_hat, l.d_s).unwrap())
        })
    });
}

fn train_epoch(c: &mut Criterion) {
    let ds = gen_synthetic(&GenConfig {
        samples_per_system: 50,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("one_epoch_1000_samples", |b| {
        b.iter(|| black_box(train(&ds, None, &ArchConfig::default(), &cfg).unwrap()))
    });
    group.finish();
}

fn mc_dropout(c: &mut Criterion) {
    let params = init_params(&ArchConfig::default(), 1).unwrap();
    let ds = gen_synthetic(&GenConfig {
        samples_per_system: 25,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = MCConfig::default();
    c.bench_function("mc_forward/25_passes", |b| {
        b.iter(|| black_box(mc_forward(&params, &ds.samples[0].features, &cfg, None).unwrap()))
    });
    let mut group = c.benchmark_group("mc_forward_batch");
    group.sample_size(20);
    group.bench_function("500_samples_25_passes", |b| {
        b.iter(|| {
            let inputs = ds.samples.par_iter().map(|s| s.features.as_slice());
            black_box(mc_forward_batch(&params, inputs, &cfg, None).unwrap())
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0)
        .collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    c.bench_function("roc_auc/10k", |b| {
        b.iter(|| black_box(roc_auc(&scores, &labels).unwrap()))
    });
    let records: Vec<EvalRecord> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| EvalRecord {
            id: i.to_string(),
            system_id: format!("sys{}", i % 20),
            y_true: 3.0 + s,
            y_pred: 3.0,
            var_pred: s + 0.01,
            domain_label: None,
        })
        .collect();
    c.bench_function("uce/10k_10_bins", |b| {
        b.iter(|| black_box(uce(&records, 10).unwrap()))
    });
}

criterion_group!(benches, forward_backward, train_epoch, mc_dropout, metrics);
criterion_main!(benches);

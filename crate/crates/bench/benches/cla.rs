use std::hint::black_box;

use cla_core::data::synthetic_corpus;
use cla_core::{
    count_parameters, kv_bytes_per_token, presets, KvCacheSet, LanguageModel, ModelConfig, SharingPattern, TrainConfig,
    Trainer, TransformerModel,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn toy(sharing: SharingPattern) -> ModelConfig {
    let mut c = ModelConfig::with_heads(64, 16, 1, 4, sharing).unwrap();
    c.seq_len = 64;
    c
}

fn tokens(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 31 + 7) % 256).collect()
}

fn plan(c: &mut Criterion) {
    let table = presets::table1();
    c.bench_function("plan/table1", |b| {
        b.iter(|| {
            for p in &table {
                black_box(kv_bytes_per_token(&p.config).unwrap());
                black_box(count_parameters(&p.config).unwrap());
            }
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    for (name, p) in [("none", SharingPattern::Uniform(1)), ("cla2", SharingPattern::Uniform(2))] {
        let model = TransformerModel::<f32>::seeded(toy(p), 0).unwrap();
        let toks = tokens(64 * 4);
        g.bench_with_input(BenchmarkId::from_parameter(name), &toks, |b, t| {
            b.iter(|| black_box(model.forward(t, 4).unwrap()))
        });
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_64_tokens");
    for (name, p) in [("none", SharingPattern::Uniform(1)), ("cla2", SharingPattern::Uniform(2))] {
        let model = TransformerModel::<f32>::seeded(toy(p), 0).unwrap();
        let toks = tokens(64);
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut cache = KvCacheSet::new(model.config(), 1).unwrap();
                for (pos, &t) in toks.iter().enumerate() {
                    black_box(model.decode_step(&[t], &mut cache, pos).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let corpus = synthetic_corpus(100_000, 0);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for (name, p) in [("none", SharingPattern::Uniform(1)), ("cla2", SharingPattern::Uniform(2))] {
        let mut model = TransformerModel::<f32>::seeded(toy(p), 0).unwrap();
        let mut trainer = Trainer::new(TrainConfig::new(1_000_000, 8, 3e-4), &model, &corpus).unwrap();
        g.bench_function(name, |b| b.iter(|| black_box(trainer.train_step(&mut model).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, plan, forward, decode, train_step);
criterion_main!(benches);

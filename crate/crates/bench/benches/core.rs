use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use statprint::probe::{directional_derivative, DerivativeMode};
use statprint::sampler::{find_stationary, SamplerConfig, Strategy};
use statprint::verifier::{auc, score, ScoreForm};
use statprint::{q_value, Architecture, EmbeddingModel, TupleSampler};
use statprint_bench::{dataset, fingerprint, model};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let graphs = dataset(4);
    let mut group = c.benchmark_group("forward");
    for arch in Architecture::ALL {
        let m = model(arch);
        group.bench_function(BenchmarkId::from_parameter(arch), |b| {
            b.iter(|| m.embed(black_box(&graphs[0])))
        });
    }
    group.finish();
}

fn probes(c: &mut Criterion) {
    let graphs = dataset(4);
    let m = model(Architecture::Gcn);
    let t = TupleSampler::new(&graphs, 3, 1e-2).expect("sampler").sample();
    c.bench_function("q_value", |b| b.iter(|| q_value(&m, black_box(&t))));
    c.bench_function("derivative/analytic", |b| {
        b.iter(|| directional_derivative(&m, black_box(&t), DerivativeMode::Analytic))
    });
    c.bench_function("derivative/central_fd", |b| {
        b.iter(|| directional_derivative(&m, black_box(&t), DerivativeMode::default()))
    });
}

fn stationary(c: &mut Criterion) {
    let graphs = dataset(4);
    let m = model(Architecture::Gcn);
    let t = TupleSampler::new(&graphs, 3, 1e-2).expect("sampler").sample();
    let mut group = c.benchmark_group("stationary");
    group.sample_size(10);
    for strategy in [Strategy::NullSpace, Strategy::FeatureSearch] {
        let cfg = SamplerConfig {
            strategy,
            ..SamplerConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(format!("{strategy:?}")), |b| {
            b.iter(|| find_stationary(&m, black_box(&t), &cfg, 7))
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let graphs = dataset(20);
    let victim = model(Architecture::Gcn);
    let fp = fingerprint(&victim, &graphs, 40);
    let candidate = model(Architecture::Sage);
    c.bench_function("score/40_points", |b| {
        b.iter(|| score(&candidate, "candidate", black_box(&fp), ScoreForm::Percentile))
    });
    let s: Vec<f64> = (0..100).map(|k| (k * 37 % 101) as f64).collect();
    let i: Vec<f64> = (0..100).map(|k| (k * 53 % 103) as f64).collect();
    c.bench_function("auc/100x100", |b| b.iter(|| auc(black_box(&s), black_box(&i))));
}

criterion_group!(benches, forward, probes, stationary, scoring);
criterion_main!(benches);

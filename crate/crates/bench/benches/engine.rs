use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use lola_core::analysis::gram_matrix;
use lola_core::numerics::{gaussian_sample, singular_values};
use lola_core::{
    prefill, AttentionConfig, CacheConfig, ChunkConfig, FeatureMapParams, LoLAState, Scorer, SeededRng, Vector,
};

struct Stream {
    attention: AttentionConfig,
    params: FeatureMapParams,
    qs: Vec<Vector>,
    ks: Vec<Vector>,
    vs: Vec<Vector>,
}

fn stream(n: usize, d: usize) -> Stream {
    let attention = AttentionConfig::new(d).unwrap();
    let mut rng = SeededRng::new(7);
    let params = FeatureMapParams::init(&mut rng, &attention).unwrap();
    let qs = gaussian_sample(&mut rng, n, d, 1.0).unwrap();
    let ks = gaussian_sample(&mut rng, n, d, 1.0).unwrap();
    let vs = gaussian_sample(&mut rng, n, d, 1.0).unwrap();
    Stream {
        attention,
        params,
        qs,
        ks,
        vs,
    }
}

/// State after ingesting the first `steps` pairs of `s`.
fn filled_state(s: &Stream, cache: CacheConfig, steps: usize) -> LoLAState {
    let mut state = LoLAState::new(s.attention, s.params.clone(), cache, Scorer::SelfRecall).unwrap();
    for i in 0..steps {
        state.ingest(&s.qs[i], s.ks[i].clone(), s.vs[i].clone()).unwrap();
    }
    state
}

fn decode_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_step");
    for d in [16, 64] {
        let s = stream(257, d);
        let state = filled_state(&s, CacheConfig::DEFAULT, 256);
        group.bench_function(BenchmarkId::from_parameter(d), |b| {
            b.iter_batched(
                || state.clone(),
                |mut st| st.ingest(&s.qs[256], s.ks[256].clone(), s.vs[256].clone()).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn attend(c: &mut Criterion) {
    let s = stream(256, 16);
    let state = filled_state(&s, CacheConfig::DEFAULT, 256);
    c.bench_function("attend/d16", |b| b.iter(|| state.attend(&s.qs[0]).unwrap()));
}

fn prefill_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("prefill");
    group.sample_size(10);
    for n in [512, 2048] {
        let s = stream(n, 16);
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| {
                prefill(
                    &s.qs,
                    &s.ks,
                    &s.vs,
                    ChunkConfig::new(64, 64).unwrap(),
                    s.attention,
                    s.params.clone(),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("singular_values");
    group.sample_size(10);
    for n in [128, 256] {
        let xs = gaussian_sample(&mut SeededRng::new(1), n, 16, 0.5).unwrap();
        let g = gram_matrix(&xs).unwrap();
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| singular_values(&g).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, decode_step, attend, prefill_bench, svd);
criterion_main!(benches);

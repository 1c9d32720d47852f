use criterion::{criterion_group, criterion_main, Criterion};
use multigran_bench::fixture;
use multigran_core::explainers::{hard_concrete_sample, Explainer, ExplainerConfig, HardConcreteParams};
use multigran_core::graph_input::InputGraph;
use multigran_core::metrics::{tro, InstanceSelection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hard_concrete(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let la: Vec<f64> = (0..4096).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let u: Vec<f64> = (0..4096).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
    let p = HardConcreteParams::default();
    c.bench_function("hard_concrete_sample/4096", |b| b.iter(|| hard_concrete_sample(&la, &p, &u).unwrap()));
}

fn verifier(c: &mut Criterion) {
    let (v, graphs) = fixture(16);
    let refs: Vec<&InputGraph> = graphs.iter().collect();
    c.bench_function("verifier_predict/16", |b| b.iter(|| v.predict_batch(&refs)));
    let ex = Explainer::new(ExplainerConfig::default(), v.config.d_model, 0);
    c.bench_function("explain/16", |b| b.iter(|| ex.explain(&v, &refs, 0.5).unwrap()));
}

fn overlap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let selections: Vec<InstanceSelection> = (0..1000)
        .map(|_| {
            let nodes = rng.gen_range(3..10);
            InstanceSelection {
                tokens: (0..nodes).map(|_| (0..20).map(|_| u8::from(rng.gen_bool(0.3))).collect()).collect(),
                partition: (0..nodes).map(|_| u8::from(rng.gen_bool(0.4))).collect(),
            }
        })
        .collect();
    c.bench_function("tro/1000", |b| b.iter(|| tro(&selections).unwrap()));
}

criterion_group!(benches, hard_concrete, verifier, overlap);
criterion_main!(benches);

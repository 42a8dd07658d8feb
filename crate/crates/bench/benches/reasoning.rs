use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mkgr_bench::fixture;
use mkgr_core::autodiff::Graph;
use mkgr_core::env::{Env, Query};
use mkgr_core::{mine_rules, ModelPolicy, Scene};

fn rules(c: &mut Criterion) {
    let mut group = c.benchmark_group("mine_rules");
    for n in [300, 1200] {
        let f = fixture(n, 8);
        let cfg = f.config.mining();
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |b, f| b.iter(|| mine_rules(&f.kg, &cfg)));
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    for d in [8, 32] {
        let f = fixture(600, d);
        let scene = Scene::new(&f.kg, &f.features);
        let r = f.queries[0].relation;
        group.bench_function(BenchmarkId::from_parameter(d), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                f.generator.encode(&mut g, &scene, r);
            })
        });
    }
    group.finish();
}

fn beam(c: &mut Criterion) {
    let f = fixture(600, 8);
    let env_cfg = f.config.env();
    let env = Env::new(&f.kg, &env_cfg);
    let q = f.queries[0];
    c.bench_function("beam_infer", |b| {
        b.iter(|| {
            let mut policy = ModelPolicy::new(&f.generator, Scene::new(&f.kg, &f.features), q.relation);
            env.beam_infer(&mut policy, &Query::from_triplet(q), f.config.beam).expect("beam")
        })
    });
}

criterion_group!(benches, rules, encode, beam);
criterion_main!(benches);

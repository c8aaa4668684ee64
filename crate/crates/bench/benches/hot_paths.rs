use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ragplan_bench::{corpus, params, queries, state, text, triple};
use ragplan_core::dsl::{parse_plan, render_plan};
use ragplan_core::policy::featurize;
use ragplan_core::types::{OpKind, Plan, PlanDefaults, PlanSource};
use ragplan_core::{build_index, dpo_grad, token_f1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve");
    let qs = queries(64, 2);
    for n in [1_000, 10_000] {
        let index = build_index(&corpus(n, 1)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &index, |b, index| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % qs.len();
                black_box(index.retrieve(&qs[i], 5).ok())
            })
        });
    }
    group.finish();
    c.bench_function("build_index/1000", |b| {
        let docs = corpus(1_000, 3);
        b.iter(|| black_box(build_index(&docs).unwrap()))
    });
}

fn f1(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred = text(&mut rng, 20);
    let gold = text(&mut rng, 20);
    c.bench_function("token_f1/20x20", |b| b.iter(|| black_box(token_f1(&pred, &gold))));
}

fn policy(c: &mut Criterion) {
    let s = state(5);
    let prefix = [OpKind::Retrieval, OpKind::RefineDoc];
    c.bench_function("featurize", |b| b.iter(|| black_box(featurize(&s, &prefix, 6))));
    let theta = params(6, 6);
    let reference = params(6, 7);
    let t = triple(6, 8);
    c.bench_function("dpo_grad/len6", |b| b.iter(|| black_box(dpo_grad(&theta, &reference, &t, 0.1).unwrap())));
}

fn dsl(c: &mut Criterion) {
    let kinds = [OpKind::RewriteQuery, OpKind::DecomposeQuery, OpKind::Retrieval, OpKind::RefineDoc];
    let plan = Plan::from_kinds(&kinds, PlanDefaults::default(), PlanSource::Manual, 6).unwrap();
    let program = render_plan(&plan);
    c.bench_function("parse_plan/5_steps", |b| b.iter(|| black_box(parse_plan(&program).unwrap())));
    c.bench_function("render_plan/5_steps", |b| b.iter(|| black_box(render_plan(&plan))));
}

criterion_group!(benches, retrieval, f1, policy, dsl);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbof_bench::{corpus, large_graph};
use sbof_core::graph::{build_graph, cut};
use sbof_core::isa::{run, Mode, RunConfig};
use sbof_core::model::{backward, forward, init_params, GraphInput, LossConfig, ModelConfig, Variant};
use sbof_core::trace::strip_instrumentation;
use sbof_core::SubgraphSample;

fn interpreter(c: &mut Criterion) {
    let entry = corpus(4).into_iter().find(|e| e.is_vulnerable).unwrap();
    let cfg = RunConfig::default();
    for (name, mode) in [("run/plain", Mode::Plain), ("run/instrumented", Mode::Instrumented)] {
        c.bench_function(name, |b| b.iter(|| run(black_box(&entry.program), &entry.input, mode, &cfg).unwrap()));
    }
    let out = run(&entry.program, &entry.input, Mode::Instrumented, &cfg).unwrap();
    c.bench_function("strip", |b| b.iter(|| strip_instrumentation(black_box(&out.trace)).unwrap()));
    let (stripped, marks) = strip_instrumentation(&out.trace).unwrap();
    c.bench_function("build_graph", |b| {
        b.iter(|| build_graph(black_box(&stripped), Some(&marks), &out.shadow).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (g, samples) = large_graph();
    let all = (0..g.graph.len() as u32).collect();
    c.bench_function("cut/4x3", |b| b.iter(|| cut(black_box(&g.graph), &samples, 4, 3, 0).unwrap()));
    let lcfg = LossConfig::default();
    for variant in [Variant::Brgcn, Variant::Rgcn, Variant::ConvGnn] {
        let cfg = ModelConfig { variant, ..ModelConfig::default() };
        let params = init_params(&cfg, 0).unwrap();
        let input = GraphInput::new(&SubgraphSample::whole(&g.graph, &all, 0), &cfg).unwrap();
        let name = format!("{variant:?}").to_lowercase();
        c.bench_function(&format!("forward/{name}"), |b| b.iter(|| forward(black_box(&input), &params, &cfg, None).unwrap()));
        c.bench_function(&format!("backward/{name}"), |b| {
            b.iter_batched(
                || ChaCha8Rng::seed_from_u64(1),
                |mut rng| backward(&input, &params, &cfg, &lcfg, &input.targets, 1.0, Some(&mut rng)).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, interpreter, model);
criterion_main!(benches);

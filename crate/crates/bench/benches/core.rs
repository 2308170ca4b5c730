use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use fedhtl::autodiff::fd_check;
use fedhtl::models::is_trainable;
use fedhtl::strategies::{fedavg_aggregate, fedmaml_update, StrategyKind};
use fedhtl_bench::{federation, mlp_workload, updates};

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradient");
    for (width, depth) in [(16, 1), (64, 3)] {
        let (params, model, batch) = mlp_workload(16, width, depth, 32);
        let names: Vec<String> = params.names().filter(|n| is_trainable(n)).map(String::from).collect();
        g.bench_function(format!("mlp-{depth}x{width}"), |b| {
            b.iter(|| {
                let mut lg = model.loss_graph(&params, &batch).unwrap();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let grads = lg.graph.gradient(lg.loss, &refs).unwrap();
                let roots: Vec<_> = names.iter().map(|n| grads[n]).collect();
                black_box(lg.graph.evaluate_many(&roots, &lg.bound.bindings).unwrap())
            })
        });
    }
    let (params, model, batch) = mlp_workload(4, 8, 2, 4);
    let lg = model.loss_graph(&params, &batch).unwrap();
    g.bench_function("fd-check-2x8", |b| b.iter(|| fd_check(&lg.graph, lg.loss, &lg.bound.bindings, 1e-5).unwrap()));
    g.finish();
}

fn meta_gradient(c: &mut Criterion) {
    let (params, model, support) = mlp_workload(16, 16, 2, 16);
    let (_, _, query) = mlp_workload(16, 16, 2, 16);
    c.bench_function("fedmaml-update-2x16", |b| {
        b.iter(|| black_box(fedmaml_update(&model, &params, &support, &query, 0.01).unwrap()))
    });
}

fn aggregation(c: &mut Criterion) {
    let ups = updates(13, 64, 64);
    c.bench_function("fedavg-aggregate-13x4096", |b| b.iter(|| black_box(fedavg_aggregate(&ups).unwrap())));
}

fn rounds(c: &mut Criterion) {
    let mut g = c.benchmark_group("round");
    g.sample_size(20);
    for kind in [StrategyKind::FedAvg, StrategyKind::FedBN, StrategyKind::Ditto, StrategyKind::FedMAML] {
        g.bench_function(kind.as_str(), |b| {
            b.iter_batched(|| federation(kind, true), |mut f| f.run_round().unwrap(), BatchSize::LargeInput)
        });
    }
    g.finish();
}

criterion_group!(benches, gradients, meta_gradient, aggregation, rounds);
criterion_main!(benches);

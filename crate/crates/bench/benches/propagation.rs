use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use sagcn::eval::{rank_all, EvalProtocol};
use sagcn::model::{forward, init_embeddings, ModelConfig};
use sagcn::SplitSpec;
use sagcn_bench::planted_graphs;

fn bench(c: &mut Criterion) {
    let graphs = planted_graphs(2000, 1000, 30);
    let config = ModelConfig {
        num_aspects: graphs.num_aspects(),
        ..Default::default()
    };
    let table = init_embeddings(&config, graphs.num_users(), graphs.num_items());

    c.bench_function("propagate_one_layer", |b| {
        b.iter(|| graphs.propagate(0, table.users[0].view(), table.items[0].view()).unwrap())
    });
    c.bench_function("forward_k3", |b| {
        b.iter(|| forward(black_box(&table), &graphs, 3, false).unwrap())
    });

    let cache = forward(&table, &graphs, 3, false).unwrap();
    let split = SplitSpec {
        seed: 0,
        train: Vec::new(),
        validation: Vec::new(),
        test: (0..graphs.num_users()).map(|u| (u, u % graphs.num_items())).collect(),
    };
    let protocol = EvalProtocol::test(&split, graphs.num_users());
    c.bench_function("rank_all_top20", |b| b.iter(|| rank_all(&cache, &protocol, 20)));
}

criterion_group!(benches, bench);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion};

use prunelab_core::data::{sample_validation, synth_dataset};
use prunelab_core::graph::{backward, forward, mean_loss, Plan};
use prunelab_core::network::{channel_param_set, ChannelId, NetworkDef, WeightStore};
use prunelab_core::oracle::{sensitivity, OracleConfig};
use prunelab_core::pruning::{PruneSession, SelectionRule};
use prunelab_core::saliency;
use prunelab_core::tensor::PassCounter;

fn bench_forward_backward(c: &mut Criterion) {
    let splits = synth_dataset(4, 400, 16, 7).unwrap();
    let net = NetworkDef::tiny((1, 16, 16), 4);
    let plan = Plan::new(&net).unwrap();
    let store = WeightStore::init(&net, 1).unwrap();
    let counter = PassCounter::new();
    let batch = splits.train.batch(&(0..32).collect::<Vec<_>>());

    c.bench_function("forward tiny batch32", |b| {
        b.iter(|| forward(&plan, &store, &batch, &counter).unwrap())
    });
    let record = forward(&plan, &store, &batch, &counter).unwrap();
    c.bench_function("backward tiny batch32", |b| {
        b.iter(|| backward(&plan, &store, &record).unwrap())
    });
}

fn bench_saliency_and_oracle(c: &mut Criterion) {
    let splits = synth_dataset(4, 800, 16, 7).unwrap();
    let net = NetworkDef::tiny((1, 16, 16), 4);
    let plan = Plan::new(&net).unwrap();
    let store = WeightStore::init(&net, 1).unwrap();
    let counter = PassCounter::new();
    let sample = sample_validation(&splits, 128, 32, 5).unwrap();

    c.bench_function("saliency sweep (all metrics, 4 batches)", |b| {
        b.iter(|| saliency::compute_all(&plan, &store, &sample, &counter).unwrap())
    });

    let base = mean_loss(&plan, &store, &sample.batches, &counter).unwrap();
    let pset = channel_param_set(&net, &store, ChannelId { layer: 0, channel: 0 }).unwrap();
    c.bench_function("sensitivity probe (4 batches)", |b| {
        b.iter(|| sensitivity(&plan, &store, &pset, &sample, base, &counter).unwrap())
    });

    c.bench_function("composite prune step (k=5)", |b| {
        b.iter(|| {
            let mut session = PruneSession::new(
                &net,
                store.clone(),
                SelectionRule::Composite(OracleConfig::with_k(5)),
                sample.clone(),
            )
            .unwrap();
            session.prune_step().unwrap().unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_forward_backward, bench_saliency_and_oracle
}
criterion_main!(benches);

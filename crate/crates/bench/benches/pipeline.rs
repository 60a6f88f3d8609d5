use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use kgclip_bench::{config, dataset};
use kgclip_core::eval::{mm_similarity, tri_similarity};
use kgclip_core::graph::{EntityKind, Relation, Split};
use kgclip_core::model::{ModelConfig, TripletModel};
use kgclip_core::trainer::Trainer;
use kgclip_core::Tensor;

fn rows(ds: &kgclip_core::features::SynthDataset, ids: &[kgclip_core::graph::EntityId]) -> Tensor {
    let r: Vec<Vec<f64>> = ids.iter().map(|id| ds.table.get(id).unwrap().to_vec()).collect();
    Tensor::from_rows(&r).unwrap()
}

fn encoder(c: &mut Criterion) {
    let model = TripletModel::init(ModelConfig::for_dim(32), 0).unwrap();
    let ds = dataset(0);
    let video = ds.graph.entities_of(EntityKind::Video).next().unwrap().clone();
    let action = ds.graph.actions()[0].clone();
    let (h, t) = (ds.table.get(&video).unwrap(), ds.table.get(&action).unwrap());
    let r = model.relation_vector(Relation::VideoAction).to_vec();
    c.bench_function("triplet_encode d32", |b| b.iter(|| model.triplet_encode(black_box(h), &r, black_box(t)).unwrap()));
}

fn similarity(c: &mut Criterion) {
    let model = TripletModel::init(ModelConfig::for_dim(32), 0).unwrap();
    let ds = dataset(0);
    let videos = ds.graph.videos_in(Split::Test);
    let actions = ds.graph.actions();
    let (v, a) = (rows(&ds, &videos), rows(&ds, &actions));
    let mut g = c.benchmark_group("similarity 80x8");
    g.sample_size(20);
    g.bench_function("mm", |b| b.iter(|| mm_similarity(&videos, &v, &actions, &a).unwrap()));
    g.bench_function("tri", |b| b.iter(|| tri_similarity(&model, &videos, &v, &actions, &a).unwrap()));
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let ds = dataset(0);
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("step batch64", |b| {
        b.iter_batched(
            || Trainer::new(&ds.graph, &ds.table, config(0)).unwrap(),
            |mut t| t.step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, encoder, similarity, train_step);
criterion_main!(benches);

//! Wall-clock benchmarks for the hot paths of the reconstruction
//! pipeline: the full iterative forward pass, one optimizer step, and
//! the rasterizer that both of them lean on.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use avatarforge_core::assets::make_default_subject;
use avatarforge_core::autodiff::{AdamParams, AdamState, lr_schedule};
use avatarforge_core::headmodel::animate;
use avatarforge_core::raster::rasterize;
use avatarforge_core::{Config, Model};

fn bench_forward(c: &mut Criterion) {
    let cfg = Config::desk();
    let model: Model<f32> = Model::new(cfg.clone()).expect("model");
    let subject = make_default_subject(3, cfg.image_res).expect("subject");

    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    group.bench_function("desk_f32", |b| {
        b.iter(|| black_box(model.forward(&subject).expect("forward")))
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = Config::desk();
    let mut model: Model<f32> = Model::new(cfg.clone()).expect("model");
    let subject = make_default_subject(3, cfg.image_res).expect("subject");
    let mut adam = AdamState::new(&model.store);
    let hp = AdamParams::default();
    let mut step = 0usize;

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("desk_f32", |b| {
        b.iter(|| {
            let run = model.forward(&subject).expect("forward");
            let grads = run.tape.backward(run.loss).expect("backward");
            let grad_vecs = run.mounts.collect(&model.store, &grads);
            let lr = lr_schedule(step, 1000, model.cfg.lr, model.cfg.warmup);
            adam.step(&mut model.store, &grad_vecs, hp, lr);
            step += 1;
            black_box(run.value(run.loss))
        })
    });
    group.finish();
}

fn bench_rasterize(c: &mut Criterion) {
    let cfg = Config::desk();
    let model: Model<f32> = Model::new(cfg).expect("model");
    let subject = make_default_subject(3, model.cfg.image_res).expect("subject");
    let posed = animate(
        &model.template,
        &model.template.vertices,
        &subject.pose_params,
    )
    .expect("animate");
    let res = model.cfg.image_res;

    c.bench_function("rasterize/desk_128", |b| {
        b.iter(|| {
            black_box(
                rasterize(&posed, &subject.pose_params.camera, res, res).expect("rasterize"),
            )
        })
    });
}

criterion_group!(benches, bench_forward, bench_train_step, bench_rasterize);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use splatrig::engine::{fit_step, Backends};
use splatrig::losses::ssim;
use splatrig::raster::{render_backward, RenderSettings};
use splatrig_bench::Scene;

fn raster(c: &mut Criterion) {
    let s = Scene::new(0);
    let av = s.truth_avatar();
    let psi = s.data.expr_row(0).to_vec();
    let cam = s.camera(1);
    let settings = RenderSettings::default();
    c.bench_function("render_64x64_truth", |b| b.iter(|| av.render(&psi, cam, &settings).unwrap()));
    let out = av.render(&psi, cam, &settings).unwrap();
    let grad = vec![1e-3; out.rgb.len()];
    c.bench_function("render_backward_64x64_truth", |b| b.iter(|| render_backward(&out, &grad, None).unwrap()));
}

fn losses(c: &mut Criterion) {
    let s = Scene::new(0);
    let cam = s.camera(0);
    let (a, b) = (&s.data.images[0][0].0, &s.data.images[0][1].0);
    c.bench_function("ssim_64x64", |bch| bch.iter(|| ssim(a, b, cam.height, cam.width).unwrap()));
}

fn training(c: &mut Criterion) {
    let s = Scene::new(0);
    let backends = Backends::new(s.config.seed);
    c.bench_function("fit_step_64x64", |b| {
        b.iter_batched(|| s.fit.clone(), |mut st| fit_step(&mut st, &s.data, &backends).unwrap(), BatchSize::LargeInput)
    });
}

fn sequence(c: &mut Criterion) {
    let s = Scene::new(0);
    let st = s.sequence_state();
    let t = 32;
    let feats = vec![0.1; t * st.model.config.feature_dim];
    c.bench_function("sequence_predict_32_frames", |b| b.iter(|| st.model.predict(&feats, t).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = raster, losses, training, sequence
}
criterion_main!(benches);

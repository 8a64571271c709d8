//! Sequential vs rayon execution of the two hot paths: per-sample gradients of
//! a training batch and the guidance passes of one denoising run.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use avdit::diffusion::{loss_and_grads, LossConfig};
use avdit::eval::sample_input;
use avdit::guidance::{sample, GuidanceConfig};
use avdit::model::{Model, ModelConfig};
use avdit::par::ExecMode;
use avdit::rng;
use avdit::synthworld::{World, WorldConfig};

fn bench(c: &mut Criterion) {
    let world = World::new(WorldConfig::default(), 0).unwrap();
    let ds = world.gen_split(8, 4, 0.5, 0, ExecMode::Parallel).unwrap();
    let model = Model::init(ModelConfig::default(), &mut rng::stream(0, "model-init")).unwrap();
    let cfg = LossConfig::for_model(&model.config, Default::default(), 0.0);
    let batch = &ds.train[..4];
    let input = sample_input(&ds.test[0]).unwrap();
    let guidance = GuidanceConfig {
        steps: 4,
        ..GuidanceConfig::default()
    };

    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let label = format!("{mode:?}");
        g.bench_with_input(BenchmarkId::new("loss_and_grads_b4", &label), &mode, |b, &m| {
            b.iter(|| loss_and_grads(&model, batch, &cfg, 1, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sample_4_steps", &label), &mode, |b, &m| {
            b.iter(|| sample(&model, &input, &guidance, m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

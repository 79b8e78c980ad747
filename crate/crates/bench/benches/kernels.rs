use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use wmlab::data::{synth_generate, SynthSpec};
use wmlab::landscape::{loss_grid, random_directions, GridSpec};
use wmlab::nn::{adam_step, forward, loss_and_grads, Model, ModelSpec, OptimizerState};
use wmlab::triggers::{build_trigger_set, LabelScheme, TriggerSources, TriggerType};

fn batch(n: usize) -> (wmlab::nn::Tensor, Vec<usize>) {
    let d = synth_generate(&SynthSpec::desk(10, n.div_ceil(10)), 7).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    d.batch(&idx).unwrap()
}

fn training_step(c: &mut Criterion) {
    let (x, y) = batch(32);
    for spec in [ModelSpec::mlp([28, 28, 1], 10), ModelSpec::small_cnn([28, 28, 1], 10)] {
        let name = format!("{:?}", spec.kind).to_lowercase();
        let mut model = Model::init(spec, 1).unwrap();
        c.bench_function(&format!("{name}/forward_b32"), |b| b.iter(|| forward(&model, black_box(&x)).unwrap()));
        c.bench_function(&format!("{name}/loss_and_grads_b32"), |b| {
            b.iter(|| loss_and_grads(&model, black_box(&x), &y).unwrap())
        });
        let (_, g) = loss_and_grads(&model, &x, &y).unwrap();
        let mut opt = OptimizerState::for_model(&model, 1e-4, 1e-4);
        c.bench_function(&format!("{name}/adam_step"), |b| {
            b.iter(|| adam_step(&mut model, black_box(&g), &mut opt, None).unwrap())
        });
    }
}

fn landscape(c: &mut Criterion) {
    let base = synth_generate(&SynthSpec::desk(10, 20), 3).unwrap();
    let set = build_trigger_set(
        &TriggerType::Noise { strength: 0.15 },
        LabelScheme::Single { target: 0 },
        TriggerSources {
            base: &base,
            ood: None,
            clean_model: None,
        },
        5,
    )
    .unwrap();
    let model = Model::init(ModelSpec::mlp([28, 28, 1], 10), 2).unwrap();
    let (d1, d2) = random_directions(&model, 9).unwrap();
    let grid = GridSpec::square(1.0, 11);
    let mut g = c.benchmark_group("landscape");
    g.sample_size(10);
    g.bench_function("mlp_loss_grid_11x11", |b| {
        b.iter(|| loss_grid(&model, &d1, &d2, &set, black_box(&grid)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, training_step, landscape);
criterion_main!(benches);

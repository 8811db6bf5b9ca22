use criterion::{black_box, criterion_group, criterion_main, Criterion};

use csd_bench::{pairs, scene};
use csd_core::model::{EnhanceModel, ModelConfig};
use csd_core::train::{FeatureExtractor, TrainConfig, Trainer, PERCEPTUAL_SEED};

fn inference(c: &mut Criterion) {
    let img = scene(64);
    for preset in ["litecsdnet", "slitecsdnet"] {
        let model = EnhanceModel::build(&ModelConfig::preset(preset).unwrap(), 0).unwrap();
        c.bench_function(&format!("{preset} enhance 64x64"), |b| {
            b.iter(|| black_box(model.enhance(&img).unwrap()))
        });
    }
}

fn training(c: &mut Criterion) {
    let data = pairs(8, 32);
    let cfg = TrainConfig {
        iterations: u64::MAX,
        batch_size: 4,
        ..Default::default()
    };
    let mut trainer = Trainer::new(
        &ModelConfig::preset("litecsdnet").unwrap(),
        None,
        cfg,
        FeatureExtractor::seeded(PERCEPTUAL_SEED),
    )
    .unwrap();
    c.bench_function("litecsdnet paired step 4x32x32", |b| {
        b.iter(|| black_box(trainer.step_paired(&data).unwrap().total))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = inference, training
}
criterion_main!(benches);

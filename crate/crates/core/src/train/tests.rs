use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Shape, Tape, Tensor, Var};
use crate::data::{synth_dataset, SynthConfig};
use crate::error::CsdError;
use crate::gradcheck::{check_gradients, GradCheckConfig};
use crate::image::Image;
use crate::model::{DiscriminatorConfig, ModelConfig, Variant};

fn full(shape: Shape, v: f32) -> Tensor {
    Tensor::full(shape, v)
}

fn scalar(tape: &Tape, v: Var) -> f32 {
    tape.value(v).item()
}

#[test]
fn mse_and_smooth_values() {
    let mut tape = Tape::new();
    let s = Shape::new(2, 3, 4, 4);
    let a = tape.constant(full(s, 0.7));
    let b = tape.constant(full(s, 0.2));
    let m = mse_loss(&mut tape, a, b).unwrap();
    assert!((scalar(&tape, m) - 0.25).abs() < 1e-6);

    let g = Shape::new(1, 1, 2, 2);
    let i = tape.constant(full(g, 0.5));
    let l = tape.constant(full(g, 0.0));
    let small = smooth_l1_illum(&mut tape, i, l).unwrap();
    assert!((scalar(&tape, small) - 0.125).abs() < 1e-7);
    let far = tape.constant(full(g, 2.0));
    let big = smooth_l1_illum(&mut tape, far, l).unwrap();
    assert!((scalar(&tape, big) - 1.5).abs() < 1e-7);
    assert!(mse_loss(&mut tape, a, i).is_err());
}

#[test]
fn perceptual_symmetric_and_positive() {
    let fe = FeatureExtractor::seeded(PERCEPTUAL_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Shape::new(1, 3, 32, 32);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::rand_uniform(s, 0.0, 1.0, &mut rng));
    let b = tape.constant(Tensor::rand_uniform(s, 0.0, 1.0, &mut rng));
    let ab = perceptual_loss(&mut tape, &fe, a, b).unwrap();
    let ba = perceptual_loss(&mut tape, &fe, b, a).unwrap();
    let aa = perceptual_loss(&mut tape, &fe, a, a).unwrap();
    assert_eq!(scalar(&tape, ab), scalar(&tape, ba));
    assert!(scalar(&tape, ab) > 0.0);
    assert_eq!(scalar(&tape, aa), 0.0);
    assert_eq!(fe.output_shape(s), Shape::new(1, 32, 2, 2));
}

fn maps(tape: &mut Tape, n: usize, v: f32) -> Vec<Var> {
    (0..n).map(|_| tape.constant(full(Shape::new(1, 1, 4, 4), v))).collect()
}

#[test]
fn relativistic_constant_critics() {
    let mut tape = Tape::new();
    let r = maps(&mut tape, 1, 0.5);
    let f = maps(&mut tape, 1, 0.5);
    let (d, g) = relativistic_losses(&mut tape, &r, &f).unwrap();
    assert!((scalar(&tape, d) - 1.0).abs() < 1e-6);
    assert!((scalar(&tape, g) - 1.0).abs() < 1e-6);
    let lr = maps(&mut tape, 5, 0.5);
    let lf = maps(&mut tape, 5, 0.5);
    let (d, g) = adversarial_losses(&mut tape, &r, &f, &lr, &lf).unwrap();
    assert!((scalar(&tape, d) - 2.0).abs() < 1e-6);
    assert!((scalar(&tape, g) - 2.0).abs() < 1e-6);

    // A perfectly separating critic: d = (1 − 0 − 1)² + (0 − 1)² = 1.
    let r = maps(&mut tape, 1, 1.0);
    let f = maps(&mut tape, 1, 0.0);
    let (d, g) = relativistic_losses(&mut tape, &r, &f).unwrap();
    assert!((scalar(&tape, d) - 1.0).abs() < 1e-6);
    assert!((scalar(&tape, g) - 5.0).abs() < 1e-6);
}

#[test]
fn relativistic_symmetry_and_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = Shape::new(1, 1, 3, 3);
    let mut tape = Tape::new();
    let real: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::randn(s, 1.0, &mut rng))).collect();
    let fake: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::randn(s, 1.0, &mut rng))).collect();
    let (d, g) = relativistic_losses(&mut tape, &real, &fake).unwrap();
    let (d_sw, g_sw) = relativistic_losses(&mut tape, &fake, &real).unwrap();
    assert!((scalar(&tape, d) - scalar(&tape, g_sw)).abs() < 1e-5);
    assert!((scalar(&tape, g) - scalar(&tape, d_sw)).abs() < 1e-5);
    let shift = |tape: &mut Tape, v: &[Var]| v.iter().map(|&x| tape.affine(x, 1.0, 3.25)).collect::<Vec<_>>();
    let (rs, fs) = (shift(&mut tape, &real), shift(&mut tape, &fake));
    let (d2, g2) = relativistic_losses(&mut tape, &rs, &fs).unwrap();
    assert!((scalar(&tape, d) - scalar(&tape, d2)).abs() < 1e-4);
    assert!((scalar(&tape, g) - scalar(&tape, g2)).abs() < 1e-4);
}

#[test]
fn relativistic_rejects_bad_sets() {
    let mut tape = Tape::new();
    let r = maps(&mut tape, 1, 0.0);
    assert!(relativistic_losses(&mut tape, &r, &[]).is_err());
    let other = tape.constant(full(Shape::new(1, 1, 2, 2), 0.0));
    assert!(matches!(
        relativistic_losses(&mut tape, &r, &[other]),
        Err(CsdError::ShapeMismatch { .. })
    ));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Shape::new(1, 3, 16, 16);
    let a = Tensor::<f64>::rand_uniform(s, 0.0, 1.0, &mut rng);
    let b = Tensor::<f64>::rand_uniform(s, 0.0, 1.0, &mut rng);
    let cfg = GradCheckConfig::default();
    let fe = FeatureExtractor::seeded(3);
    // ReLU, max-pool and |·| kinks sit close together in the feature stack;
    // a small step keeps the central difference on one side of them.
    let fine = GradCheckConfig { step: 1e-6, ..cfg };
    let checks: Vec<(&str, crate::gradcheck::GradCheckReport)> = vec![
        ("mse", check_gradients(&[a.clone(), b.clone()], &[0, 1], cfg, |t, v| mse_loss(t, v[0], v[1])).unwrap()),
        (
            "smooth",
            check_gradients(&[a.clone(), b.clone()], &[0], cfg, |t, v| {
                let x = t.affine(v[0], 3.0, -1.0);
                smooth_l1_illum(t, x, v[1])
            })
            .unwrap(),
        ),
        (
            "perceptual",
            check_gradients(&[a.clone(), b.clone()], &[0], fine, |t, v| perceptual_loss(t, &fe, v[0], v[1])).unwrap(),
        ),
    ];
    for (name, rep) in checks {
        assert!(rep.passed(), "{name}: {:?}", rep.mismatches.first());
    }
    let m = Shape::new(1, 1, 2, 2);
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(m, 1.0, &mut rng)).collect();
    for which in 0..2 {
        let rep = check_gradients(&inputs, &[0, 1, 2, 3], cfg, |t, v| {
            let (d, g) = relativistic_losses(t, &v[..2], &v[2..])?;
            Ok(if which == 0 { d } else { g })
        })
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.mismatches.first());
    }
}

#[test]
fn batches_cover_each_epoch_once() {
    let len = 10;
    let mut seen: Vec<usize> = (0..5).flat_map(|it| batch_indices(9, it, len, 4)).collect();
    assert_eq!(seen.len(), 20);
    let mut epoch0: Vec<usize> = seen.drain(..10).collect();
    epoch0.sort_unstable();
    assert_eq!(epoch0, (0..10).collect::<Vec<_>>());
    assert_eq!(batch_indices(9, 3, len, 4), batch_indices(9, 3, len, 4));
    assert_ne!(
        (0..3).flat_map(|it| batch_indices(9, it, len, 4)).collect::<Vec<_>>(),
        (0..3).flat_map(|it| batch_indices(8, it, len, 4)).collect::<Vec<_>>()
    );
}

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        channel_plan: vec![4; 9],
        ..ModelConfig::for_variant(variant)
    }
}

fn pairs(n: usize) -> Vec<(Image, Image)> {
    synth_dataset(n, 16, &SynthConfig::default())
        .unwrap()
        .into_iter()
        .map(|s| (s.low, s.normal))
        .collect()
}

fn config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        optimizer: crate::autodiff::OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn paired_training_records_every_step() {
    let data = pairs(4);
    for variant in [Variant::ArcE, Variant::ArcF] {
        let mut t = Trainer::new(&tiny_model(variant), None, config(3), FeatureExtractor::seeded(1)).unwrap();
        let report = t.run_paired(&data, |_| {}).unwrap();
        assert_eq!(report.records.len(), 3);
        assert_eq!(t.iteration, 3);
        let csv = report.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("iteration,mse,perceptual,smooth"));
        assert_eq!(header.ends_with("total,wall_ms"), true);
        assert_eq!(header.contains("reconstruction"), variant == Variant::ArcE);
        assert_eq!(csv.lines().count(), 4);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = pairs(5);
    let model = tiny_model(Variant::ArcD);
    let fe = FeatureExtractor::seeded(1);
    let mut straight = Trainer::new(&model, None, config(6), fe.clone()).unwrap();
    straight.run_paired(&data, |_| {}).unwrap();

    let mut first = Trainer::new(&model, None, config(2), fe.clone()).unwrap();
    first.run_paired(&data, |_| {}).unwrap();
    let mut buf = Vec::new();
    first.checkpoint().write_to(&mut buf).unwrap();
    let ck = Checkpoint::read_from(buf.as_slice(), std::path::Path::new("mem")).unwrap();
    let mut resumed = Trainer::from_checkpoint(ck, config(6), fe).unwrap();
    resumed.run_paired(&data, |_| {}).unwrap();
    assert!(resumed.model.store().same_values(straight.model.store()));
}

#[test]
fn non_finite_aborts_without_update() {
    let data = pairs(2);
    let mut t = Trainer::new(&tiny_model(Variant::ArcF), None, config(2), FeatureExtractor::seeded(1)).unwrap();
    t.model.store_mut().entries_mut()[0].value.data_mut()[0] = f32::NAN;
    let before = t.model.clone();
    let err = t.step_paired(&data).unwrap_err();
    assert!(matches!(err, CsdError::NonFinite { .. }), "{err}");
    assert_eq!(t.iteration, 0);
    let same = before
        .store()
        .entries()
        .iter()
        .zip(t.model.store().entries())
        .all(|(a, b)| a.value.bit_eq(&b.value));
    assert!(same);
}

#[test]
fn adversarial_step_updates_both_networks() {
    let data = pairs(4);
    let lows: Vec<Image> = data.iter().map(|p| p.0.clone()).collect();
    let reals: Vec<Image> = data.iter().map(|p| p.1.clone()).collect();
    let disc = DiscriminatorConfig {
        patch_size: 8,
        patch_count: 2,
        ..Default::default()
    };
    let model = ModelConfig {
        residual_output: true,
        ..tiny_model(Variant::ArcD)
    };
    let mut t = Trainer::new(&model, Some(&disc), config(2), FeatureExtractor::seeded(1)).unwrap();
    let d_before = t.disc.as_ref().unwrap().0.store().clone();
    let g_before = t.model.store().clone();
    let report = t.run_adversarial(&lows, &reals, |_| {}).unwrap();
    assert!(report.records.iter().all(|r| r.total.is_finite()));
    assert_eq!(report.records[0].terms.last().unwrap().0, "critic");
    assert!(!t.disc.as_ref().unwrap().0.store().same_values(&d_before));
    assert!(!t.model.store().same_values(&g_before));
    let mut buf = Vec::new();
    t.checkpoint().write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(buf.as_slice(), std::path::Path::new("mem")).unwrap();
    assert!(back.disc.is_some());
    assert_eq!(back.iteration, 2);
}

#[test]
fn train_config_pairs_roundtrip() {
    let cfg = TrainConfig {
        crop_size: Some(32),
        checkpoint_every: 10,
        ..config(7)
    };
    let mut back = TrainConfig::default();
    for (k, v) in cfg.to_pairs() {
        assert!(back.set(&k, &v).unwrap(), "{k}");
    }
    assert_eq!(back, cfg);
    assert!(back.set("train.bogus", "1").is_err());
    assert!(!back.set("model.variant", "arc_a").unwrap());
    assert!(TrainConfig { crop_size: Some(24), ..cfg }.validate().is_err());
}

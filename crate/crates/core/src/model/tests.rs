use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Binding, Conv2d, EntryKind, ParamStore, Shape, Tape, Tensor};

fn input(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(Shape::new(n, 3, size, size), 0.05, 0.6, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn lite(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::for_variant(variant);
    c.channel_plan = LITE_CHANNEL_PLAN.to_vec();
    c
}

#[test]
fn single_conv_count() {
    let mut store = ParamStore::new();
    Conv2d::new(&mut store, "c", 2, 4, 3, 1, 1, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(store.count_learnable(), 76);
}

#[test]
fn two_stream_input_channels() {
    let m = EnhanceModel::build(&ModelConfig::default(), 0).unwrap();
    assert_eq!(m.input_channels(), (2, 3));
    let mut off = ModelConfig::default();
    off.guidance = false;
    assert_eq!(EnhanceModel::build(&off, 0).unwrap().input_channels(), (1, 3));
}

#[test]
fn shared_encoder_is_smaller() {
    for plan in [DEFAULT_CHANNEL_PLAN.to_vec(), LITE_CHANNEL_PLAN.to_vec(), vec![4, 8, 8, 16, 16, 16, 8, 8, 4]] {
        let mut f = ModelConfig::for_variant(Variant::ArcF);
        f.channel_plan = plan.clone();
        let mut d = ModelConfig::for_variant(Variant::ArcD);
        d.channel_plan = plan;
        let cf = EnhanceModel::build(&f, 0).unwrap().count_params();
        let cd = EnhanceModel::build(&d, 0).unwrap().count_params();
        assert!(cd < cf, "{cd} vs {cf}");
    }
}

#[test]
fn param_table_sums_to_total() {
    let m = EnhanceModel::build(&lite(Variant::ArcF), 0).unwrap();
    let rows = m.param_table();
    assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), m.count_params());
    assert!(rows.iter().any(|r| r.name == "ienet.enc0.conv.weight" && r.shape == Shape::new(12, 2, 3, 3)));
    assert!(rows.iter().any(|r| r.name.ends_with("running_var") && r.count == 0));
}

#[test]
fn output_shapes_for_every_variant() {
    let x = input(2, 32, 1);
    for v in Variant::ALL {
        for guidance in [false, true] {
            let mut cfg = lite(v);
            cfg.guidance = guidance;
            let m = EnhanceModel::build(&cfg, 3).unwrap();
            let out = m.forward(&x, true, ForwardHooks::default()).unwrap();
            assert_eq!(out.len(), 2);
            for r in &out {
                assert_eq!((r.enhanced.height(), r.enhanced.width(), r.enhanced.channels()), (32, 32, 3));
                assert_eq!((r.illumination.height(), r.illumination.channels()), (32, 1));
                assert_eq!(r.reflectance.channels(), 3);
            }
        }
    }
}

#[test]
fn rejects_indivisible_extents() {
    let m = EnhanceModel::build(&lite(Variant::ArcF), 0).unwrap();
    let x = Tensor::zeros(Shape::new(1, 3, 24, 32));
    let err = m.forward(&x, false, ForwardHooks::default()).unwrap_err();
    assert!(err.to_string().contains("pad"));
}

#[test]
fn reconstruction_variants_output_reflectance() {
    let x = input(1, 32, 2);
    for v in [Variant::ArcA, Variant::ArcC, Variant::ArcE] {
        let m = EnhanceModel::build(&lite(v), 5).unwrap();
        let r = &m.forward(&x, false, ForwardHooks::default()).unwrap()[0];
        assert!(r.enhanced.data().iter().zip(r.reflectance.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn csd_variants_output_division() {
    let x = input(1, 32, 2);
    for v in [Variant::ArcB, Variant::ArcD, Variant::ArcF] {
        let m = EnhanceModel::build(&lite(v), 5).unwrap();
        let r = &m.forward(&x, false, ForwardHooks::default()).unwrap()[0];
        let expect = crate::retinex::final_enhance(&r.reflectance, &r.illumination, m.config().eps).unwrap();
        assert!(r.enhanced.max_abs_diff(&expect) < 1e-6);
    }
}

#[test]
fn placements_differ() {
    let x = input(1, 32, 4);
    let mut both = lite(Variant::ArcF);
    both.csd_placement = CsdPlacement::Both;
    let mut up = both.clone();
    up.csd_placement = CsdPlacement::UpsampleOnly;
    let a = &EnhanceModel::build(&both, 9).unwrap().forward(&x, true, ForwardHooks::default()).unwrap()[0];
    let b = &EnhanceModel::build(&up, 9).unwrap().forward(&x, true, ForwardHooks::default()).unwrap()[0];
    assert!(a.enhanced.max_abs_diff(&b.enhanced) > 1e-6);
}

#[test]
fn unit_illumination_matches_reflectance_stream() {
    let x = input(2, 32, 6);
    for v in [Variant::ArcD, Variant::ArcF] {
        for placement in [CsdPlacement::UpsampleOnly, CsdPlacement::SkipAddOnly, CsdPlacement::Both] {
            let mut cfg = lite(v);
            cfg.csd_placement = placement;
            let m = EnhanceModel::build(&cfg, 11).unwrap();
            let unit = ForwardHooks {
                unit_illumination: true,
                ..Default::default()
            };
            let alone = ForwardHooks {
                unit_illumination: true,
                reflectance_only: true,
                ..Default::default()
            };
            for training in [false, true] {
                let a = m.forward(&x, training, unit).unwrap();
                let b = m.forward(&x, training, alone).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    let diff = p.enhanced.max_abs_diff(&q.enhanced);
                    assert!(diff < 8.0 * 2.0 * cfg.eps, "{v} {placement} {training}: {diff}");
                }
            }
        }
    }
}

#[test]
fn division_by_ones_at_every_depth() {
    let x = input(1, 32, 8);
    let m = EnhanceModel::build(&lite(Variant::ArcF), 12).unwrap();
    let mut tape = Tape::new();
    let mut bind = Binding::new(m.store(), false);
    let hooks = ForwardHooks {
        trace: true,
        ..Default::default()
    };
    let vars = m.forward_vars(&mut tape, &mut bind, &x, hooks).unwrap();
    let refl: Vec<_> = vars.traces.iter().filter(|(n, _)| n.starts_with("renet")).collect();
    assert_eq!(refl.len(), 8);
    for (name, v) in refl {
        let ones = tape.constant(Tensor::ones(tape.shape(*v)));
        let q = crate::retinex::csd_divide(&mut tape, *v, ones, m.config().eps).unwrap();
        for (a, b) in tape.value(q).data().iter().zip(tape.value(*v).data()) {
            assert!((a - b).abs() <= 2.0 * m.config().eps * b.abs(), "{name}");
        }
    }
}

#[test]
fn gradients_reach_every_parameter() {
    let x = input(2, 32, 10);
    for v in Variant::ALL {
        let m = EnhanceModel::build(&lite(v), 13).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binding::new(m.store(), true);
        let vars = m.forward_vars(&mut tape, &mut bind, &x, ForwardHooks::default()).unwrap();
        let loss = tape.mean_all(vars.enhanced);
        tape.backward(loss).unwrap();
        let mut store = m.store().clone();
        store.accumulate_grads(&tape, &bind);
        let learnable = store.entries().iter().filter(|e| e.kind == EntryKind::Weight).count();
        assert_eq!(bind.bound().len(), learnable, "{v}");
        assert!(store.all_grads_finite(), "{v}");
        if v.connection() == Connection::Csd && v.framework() != Framework::Single {
            let illum_grad: f32 = store
                .entries()
                .iter()
                .filter(|e| e.name.starts_with("ienet") && e.name.ends_with("conv.weight"))
                .map(|e| e.grad.iter().map(|g| g.abs()).sum::<f32>())
                .sum();
            assert!(illum_grad > 0.0, "{v}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let x = input(2, 32, 14);
    let m = EnhanceModel::build(&lite(Variant::ArcF), 15).unwrap();
    let a = m.forward(&x, true, ForwardHooks::default()).unwrap();
    let b = m.forward(&x, true, ForwardHooks::default()).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!(p.enhanced.data().iter().zip(q.enhanced.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let again = EnhanceModel::build(&lite(Variant::ArcF), 15).unwrap();
    assert!(again.store().same_values(m.store()));
}

#[test]
fn residual_output_adds_input() {
    let x = input(1, 32, 16);
    let mut cfg = lite(Variant::ArcF);
    cfg.residual_output = true;
    let m = EnhanceModel::build(&cfg, 17).unwrap();
    let mut tape = Tape::new();
    let mut bind = Binding::new(m.store(), false);
    let vars = m.forward_vars(&mut tape, &mut bind, &x, ForwardHooks::default()).unwrap();
    assert_eq!(tape.shape(vars.reflectance), x.shape());
    let delta: Vec<f32> = tape
        .value(vars.reflectance)
        .data()
        .iter()
        .zip(x.data())
        .map(|(r, l)| r - l)
        .collect();
    assert!(delta.iter().any(|d| d.abs() > 1e-6));
}

#[test]
fn discriminator_extents() {
    let d = Discriminator::build(&DiscriminatorConfig::default(), 0).unwrap();
    for (size, out) in [(64, 8), (32, 4)] {
        let mut tape = Tape::new();
        let mut bind = Binding::new(d.store(), false);
        let x = tape.constant(input(1, size, 1));
        let s = d.forward(&mut tape, &mut bind, x).unwrap();
        assert_eq!(tape.shape(s), Shape::new(1, 1, out, out));
    }
    let mut tape = Tape::new();
    let mut bind = Binding::new(d.store(), false);
    let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 20, 32)));
    assert!(d.forward(&mut tape, &mut bind, x).is_err());
}

#[test]
fn zero_discriminator_scores_bias() {
    let mut d = Discriminator::build(&DiscriminatorConfig::default(), 0).unwrap();
    for e in d.store_mut().entries_mut() {
        e.value.data_mut().fill(0.0);
    }
    let bias = d.store().find("disc.score.bias").unwrap();
    d.store_mut().get_mut(bias).value.data_mut()[0] = 0.37;
    let mut tape = Tape::new();
    let mut bind = Binding::new(d.store(), false);
    let x = tape.constant(input(2, 32, 3));
    let s = d.forward(&mut tape, &mut bind, x).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v == 0.37));
}

#[test]
fn floored_division_stays_bounded() {
    // With every illumination feature at zero, unfloored division scales the
    // reflectance features by 1/eps; the floor keeps them at their own scale.
    let x = input(1, 32, 14);
    let worst = |floor: f32| {
        let cfg = ModelConfig {
            feature_floor: floor,
            ..lite(Variant::ArcF)
        };
        let mut m = EnhanceModel::build(&cfg, 15).unwrap();
        for e in m.store_mut().entries_mut() {
            if e.name.starts_with("ienet.") && e.name.contains(".bn.") && e.kind == EntryKind::Weight {
                e.value.data_mut().fill(0.0);
            }
        }
        let out = m.forward(&x, false, ForwardHooks { trace: true, ..Default::default() }).unwrap();
        out[0]
            .decoder_traces
            .as_ref()
            .unwrap()
            .iter()
            .filter(|(n, _)| n.starts_with("renet"))
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(0.0f32, f32::max)
    };
    assert!(worst(0.0) > 1e3);
    assert!(worst(DEFAULT_FEATURE_FLOOR) < 1e3);
}

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use csd_bench::{scene, wave};
use csd_core::autodiff::{Shape, Tape};
use csd_core::eval::{psnr, ssim};
use csd_core::retinex::{csd_divide, illumination_guidance, to_grayscale, EPS};

fn conv(c: &mut Criterion) {
    let x = wave(Shape::new(4, 12, 32, 32));
    let w = wave(Shape::new(12, 12, 3, 3));
    c.bench_function("conv3x3 12->12 4x32x32 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let loss = tape.mean_all(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]))
        })
    });
}

fn division(c: &mut Criterion) {
    let fr = wave(Shape::new(4, 12, 32, 32));
    let fi = wave(Shape::new(4, 12, 32, 32)).map(|v| v.abs());
    c.bench_function("csd_divide 4x12x32x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let r = tape.constant(fr.clone());
            let i = tape.constant(fi.clone());
            black_box(csd_divide(&mut tape, r, i, EPS).unwrap())
        })
    });
}

fn guidance(c: &mut Criterion) {
    let gray = to_grayscale(&scene(256));
    c.bench_function("illumination guidance 256x256", |b| {
        b.iter(|| black_box(illumination_guidance(&gray).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let a = scene(256);
    let b = a.map(|v| v * 0.9).unwrap();
    c.bench_function("psnr 256x256", |bench| bench.iter(|| black_box(psnr(&a, &b).unwrap())));
    c.bench_function("ssim 256x256", |bench| bench.iter(|| black_box(ssim(&a, &b).unwrap())));
}

criterion_group!(benches, conv, division, guidance, metrics);
criterion_main!(benches);

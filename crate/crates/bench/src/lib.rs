//! Deterministic inputs shared by the benchmarks.

use csd_core::autodiff::{Shape, Tensor};
use csd_core::data::{synth_dataset, SynthConfig};
use csd_core::Image;

/// A smooth, non-constant tensor with values in `[-1, 1]`.
pub fn wave(shape: Shape) -> Tensor {
    let data = (0..shape.numel()).map(|k| ((k as f32) * 0.37).sin()).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// A colourful `size`×`size` test scene.
pub fn scene(size: usize) -> Image {
    Image::from_fn(size, size, 3, |y, x, c| {
        let t = (y * 7 + x * 3 + c * 11) as f32;
        0.5 + 0.45 * (t * 0.05).sin()
    })
    .expect("finite pixels")
}

/// `count` synthetic low/normal pairs.
pub fn pairs(count: usize, size: usize) -> Vec<(Image, Image)> {
    synth_dataset(count, size, &SynthConfig::default())
        .expect("valid synth config")
        .into_iter()
        .map(|s| (s.low, s.normal))
        .collect()
}

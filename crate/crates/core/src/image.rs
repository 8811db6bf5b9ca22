//! Interleaved H×W×C images with values in `[0, 1]`.

use crate::autodiff::{Shape, Tensor};
use crate::error::{CsdError, Result};

/// A 1- or 3-channel image. Pixel values are clamped to `[0, 1]` whenever an
/// image is constructed.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CsdError::invalid("image", "extents must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(CsdError::invalid("image", format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(CsdError::invalid(
                "image",
                format!("{} values for {height}x{width}x{channels}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CsdError::NonFinite { what: "image pixels".into() });
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from `f(y, x, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_extents(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Applies `f` to every value; the result is clamped like any new image.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Image> {
        Image::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Single channel `c` as a 1-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Planar 1×C×H×W tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(Shape::new(1, c, h, w), out).expect("extents match")
    }

    /// Sample `index` of an N×C×H×W tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Image> {
        let s = t.shape();
        if index >= s.n() {
            return Err(CsdError::invalid("image", format!("sample {index} of batch {}", s.n())));
        }
        let (c, h, w) = (s.c(), s.h(), s.w());
        let plane = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        let mut data = vec![0.0; plane.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = plane[(ch * h + y) * w + x];
                }
            }
        }
        Image::new(h, w, c, data)
    }

    /// Stacks images of equal extents into an N×C×H×W batch.
    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let tensors: Vec<Tensor> = images.iter().map(Image::to_tensor).collect();
        Tensor::stack(&tensors)
    }
}

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CsdError, Result};

/// Element type of tensors and tapes. Networks run in f32; the f64
/// instantiation exists for high-precision gradient checking.
pub trait Real: num_traits::Float + std::iter::Sum + fmt::Debug + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn f64(self) -> f64;
    /// Bit pattern widened to u64, for exact comparisons.
    fn bits(self) -> u64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one (height, width) plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn with_channels(&self, c: usize) -> Shape {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

/// Dense row-major tensor (f32 unless stated). This is the value type;
/// gradients live on the [`Tape`](super::Tape) node that owns a recorded value.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.0.iter().any(|&e| e == 0) {
            return Err(CsdError::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        if data.len() != shape.numel() {
            return Err(CsdError::invalid(
                "tensor",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Shorthand for a 1×1×1×len row, handy in tests.
    pub fn from_slice(values: &[T]) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, values.len()),
            data: values.to_vec(),
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, std).expect("finite std");
        let data = (0..shape.numel()).map(|_| T::lit(normal.sample(rng))).collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::lit(rng.random_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cs, hs, ws] = self.shape.0;
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// One sample of the batch as a 1×C×H×W tensor.
    pub fn sample(&self, index: usize) -> Self {
        let per = self.shape.numel() / self.shape.n();
        Tensor {
            shape: Shape([1, self.shape.c(), self.shape.h(), self.shape.w()]),
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// Stacks tensors along the batch axis; all other extents must agree.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| CsdError::invalid("stack", "empty input"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if ts.0[1..] != s.0[1..] {
                return Err(CsdError::ShapeMismatch {
                    op: "stack",
                    left: s.0,
                    right: ts.0,
                });
            }
            n += ts.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape([n, s.c(), s.h(), s.w()]),
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }
}

//! Dense rank-4 tensors in `(batch, channels, height, width)` layout.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dimensions of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("every dimension must be at least 1, got {shape}"),
            });
        }
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("{shape} needs {} values, got {}", shape.numel(), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Entries drawn from N(0, 1).
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, low: f64, high: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(low..high))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous `h * w` plane for one `(n, c)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = self.shape.offset(n, c, 0, 0);
        &self.data[start..start + self.shape.spatial()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let start = self.shape.offset(n, c, 0, 0);
        let len = self.shape.spatial();
        &mut self.data[start..start + len]
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Channel range `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape.c {
            return Err(Error::OutOfRange {
                op: "slice_channels",
                detail: format!("channels {start}..{} of {}", start + len, self.shape),
            });
        }
        let shape = self.shape.with_channels(len);
        let plane = self.shape.spatial();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            let from = self.shape.offset(n, start, 0, 0);
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Tensor { shape, data })
    }

    /// Single batch item as a `1 x c x h x w` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let shape = Shape::new(1, self.shape.c, self.shape.h, self.shape.w);
        let len = shape.numel();
        Tensor {
            shape,
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }
}

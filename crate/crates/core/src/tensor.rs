//! Dense strided tensors.
//!
//! Attention operands use the layout `[batch, heads, spatial..., dim]`. Operators
//! require the canonical row-major layout; anything else is copied into it with
//! [`Tensor::to_contiguous`] first.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{NaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Fp32,
    Fp64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::Fp32 => 4,
            DType::Fp64 => 8,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::Fp32 => "fp32",
            DType::Fp64 => "fp64",
        })
    }
}

/// Scalar types the operators compute in. Accumulation happens in the element type itself.
pub trait Element:
    Float + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Most negative finite value; used to mark masked logits.
    fn masked() -> Self {
        Self::min_value()
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::Fp32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Fp64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(NaError::ShapeMismatch {
                what: "tensor buffer",
                expected: vec![len],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        })
    }

    /// Wraps a buffer with explicit element strides. Every addressable element must
    /// lie inside the buffer.
    pub fn from_strided(shape: &[usize], strides: &[usize], data: Vec<T>) -> Result<Self> {
        let bad = || NaError::BadStrides {
            shape: shape.to_vec(),
            strides: strides.to_vec(),
            len: data.len(),
        };
        if shape.len() != strides.len() {
            return Err(bad());
        }
        if shape.iter().any(|&s| s == 0) {
            return Self::from_vec(shape, Vec::new());
        }
        let max_offset: usize = shape
            .iter()
            .zip(strides)
            .map(|(&s, &st)| (s - 1) * st)
            .sum();
        if max_offset >= data.len() {
            return Err(bad());
        }
        Ok(Self {
            shape: shape.to_vec(),
            strides: strides.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for slot in out.data.iter_mut() {
            *slot = f(&idx);
            for a in (0..idx.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }

    /// Uniform values in `[-1, 1)` from a seeded generator.
    pub fn random(shape: &[usize], seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect();
        Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == row_major_strides(&self.shape) && self.data.len() == self.len()
    }

    /// Underlying buffer. Only meaningful as row-major data when [`Self::is_contiguous`].
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        idx.iter()
            .zip(&self.shape)
            .zip(&self.strides)
            .map(|((&i, &s), &st)| {
                assert!(i < s, "index {i} out of bounds for axis of size {s}");
                i * st
            })
            .sum()
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn to_contiguous(&self) -> Self {
        if self.is_contiguous() {
            return self.clone();
        }
        Self::from_fn(&self.shape, |idx| self.get(idx))
    }

    /// Reorders axes by permuting strides; element order in the buffer is unchanged.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.shape.len());
        Self {
            shape: order.iter().map(|&a| self.shape[a]).collect(),
            strides: order.iter().map(|&a| self.strides[a]).collect(),
            data: self.data.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        // no early exit, so the scan vectorizes
        self.data.iter().fold(true, |ok, v| ok & v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let c = self.to_contiguous();
        Self {
            shape: c.shape,
            strides: c.strides,
            data: c.data.into_iter().map(f).collect(),
        }
    }

    /// Converts element type through f64.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let c = self.to_contiguous();
        Tensor {
            shape: c.shape,
            strides: c.strides,
            data: c
                .data
                .into_iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let (a, b) = (self.to_contiguous(), other.to_contiguous());
        a.data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of values, independent of layout.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let (a, b) = (self.to_contiguous(), other.to_contiguous());
        a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
    }
}

//! Rank-4 NCHW tensors and the CPU kernels the network is built from.
//!
//! Every tensor is `(n, c, h, w)` with row-major storage: element
//! `(n, c, y, x)` lives at `((n * C + c) * H + y) * W + x`. All kernels are
//! single-threaded and reduce in a fixed order, so equal inputs always
//! produce bitwise-equal outputs.

mod conv;
mod ops;
mod scalar;

pub use conv::{
    conv2d, conv2d_backward_input, conv2d_backward_weight, conv2d_bias_grad, conv_transpose2d, ConvGeom, ConvSpec,
};
pub use ops::*;
pub use scalar::Scalar;

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && y < self.h && x < self.w);
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Inverse of [`Shape::offset`].
    pub fn unravel(&self, offset: usize) -> (usize, usize, usize, usize) {
        let x = offset % self.w;
        let rest = offset / self.w;
        let y = rest % self.h;
        let rest = rest / self.h;
        (rest / self.c, rest % self.c, y, x)
    }

    pub fn with_c(&self, c: usize) -> Self {
        Shape { c, ..*self }
    }

    pub fn with_hw(&self, h: usize, w: usize) -> Self {
        Shape { h, w, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// An immutable-by-convention rank-4 array of finite scalars.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Tensor { shape, data })
    }

    /// Kernel-internal constructor; callers guarantee the length.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    /// Fills element `(n, c, y, x)` with `f(n, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A `(1, len, 1, 1)` tensor, the layout used for bias vectors.
    pub fn vector(values: &[T]) -> Self {
        Tensor::from_raw(Shape::new(1, values.len(), 1, 1), values.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_raw(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.offset(n, c, y, x)]
    }

    /// Returns a copy with `(n, c, y, x)` replaced.
    pub fn with_value(&self, idx: (usize, usize, usize, usize), value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        let mut out = self.clone();
        let off = self.shape.offset(idx.0, idx.1, idx.2, idx.3);
        out.data[off] = value;
        Ok(out)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Converts element type, e.g. to `f64` for gradient checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64()).expect("finite cast")).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("dot of {} and {}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits64() == b.to_bits64())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Contiguous slice holding one `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_unravel_bijection() {
        let s = Shape::new(2, 3, 4, 5);
        for off in 0..s.numel() {
            let (n, c, y, x) = s.unravel(off);
            assert_eq!(s.offset(n, c, y, x), off);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        let s = Shape::new(1, 1, 1, 2);
        assert!(matches!(Tensor::<f32>::from_vec(s, vec![1.0, f32::NAN]), Err(Error::NonFinite)));
        assert!(matches!(Tensor::<f32>::from_vec(s, vec![1.0, f32::INFINITY]), Err(Error::NonFinite)));
        assert!(matches!(Tensor::<f32>::from_vec(s, vec![1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn from_fn_is_row_major() {
        let s = Shape::new(1, 2, 2, 3);
        let t = Tensor::<f32>::from_fn(s, |n, c, y, x| s.offset(n, c, y, x) as f32);
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, i as f32);
        }
    }
}

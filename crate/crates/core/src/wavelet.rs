//! Single-level orthonormal 2-D Haar transform.
//!
//! Each 2×2 block `[a b; c d]` maps to
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a + b − c − d) / 2
//! hl = (a − b + c − d) / 2      hh = (a − b − c + d) / 2
//! ```
//!
//! The transform matrix is symmetric and orthogonal, so it is its own
//! inverse and adjoint: the backward pass of `dwt2` is `iwt2` and vice versa.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{concat_channels, slice_channels, Scalar, Shape, Tensor};

/// The four detail bands of one decomposition level, each `(n, c, h/2, w/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands<T: Scalar = f32> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> Subbands<T> {
    pub fn shape(&self) -> Shape {
        self.ll.shape()
    }

    /// Concatenates `[ll, lh, hl, hh]` on the channel axis (`c → 4c`).
    pub fn stack(&self) -> Result<Tensor<T>> {
        self.check()?;
        concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    /// Inverse of [`Subbands::stack`].
    pub fn unstack(x: &Tensor<T>) -> Result<Self> {
        let c4 = x.shape().c;
        if !c4.is_multiple_of(4) {
            return Err(Error::ChannelNotDivisible { channels: c4, factor: 4 });
        }
        let c = c4 / 4;
        Ok(Subbands {
            ll: slice_channels(x, 0, c)?,
            lh: slice_channels(x, c, c)?,
            hl: slice_channels(x, 2 * c, c)?,
            hh: slice_channels(x, 3 * c, c)?,
        })
    }

    /// Σ of squares over all four bands.
    pub fn energy(&self) -> T {
        self.ll.sum_squares() + self.lh.sum_squares() + self.hl.sum_squares() + self.hh.sum_squares()
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        for band in [&self.lh, &self.hl, &self.hh] {
            if band.shape() != s {
                return Err(shape_err(format!("subband shapes differ: {s} vs {}", band.shape())));
            }
        }
        Ok(())
    }
}

pub fn dwt2<T: Scalar>(x: &Tensor<T>) -> Result<Subbands<T>> {
    Subbands::unstack(&dwt2_stacked(x)?)
}

pub fn iwt2<T: Scalar>(s: &Subbands<T>) -> Result<Tensor<T>> {
    iwt2_stacked(&s.stack()?)
}

/// Forward transform with the bands stacked on the channel axis:
/// `(n, c, h, w) → (n, 4c, h/2, w/2)` ordered `[ll, lh, hl, hh]`.
pub fn dwt2_stacked<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
        return Err(Error::OddSpatialDim { h: s.h, w: s.w });
    }
    let (h2, w2) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, 4 * s.c, h2, w2);
    let q = h2 * w2;
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = |band: usize| ((n * 4 + band) * s.c + c) * q;
            let (ll0, lh0, hl0, hh0) = (base(0), base(1), base(2), base(3));
            for y in 0..h2 {
                let r0 = &src[2 * y * s.w..][..s.w];
                let r1 = &src[(2 * y + 1) * s.w..][..s.w];
                for xx in 0..w2 {
                    let (a, b) = (r0[2 * xx], r0[2 * xx + 1]);
                    let (cc, d) = (r1[2 * xx], r1[2 * xx + 1]);
                    let i = y * w2 + xx;
                    out[ll0 + i] = (a + b + cc + d) * half;
                    out[lh0 + i] = (a + b - cc - d) * half;
                    out[hl0 + i] = (a - b + cc - d) * half;
                    out[hh0 + i] = (a - b - cc + d) * half;
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Inverse of [`dwt2_stacked`]: `(n, 4c, h, w) → (n, c, 2h, 2w)`.
pub fn iwt2_stacked<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.c.is_multiple_of(4) {
        return Err(shape_err(format!("stacked subbands need 4c channels, got {}", s.c)));
    }
    let c = s.c / 4;
    let out_shape = Shape::new(s.n, c, 2 * s.h, 2 * s.w);
    let ow = out_shape.w;
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..s.n {
        for ch in 0..c {
            let ll = x.plane(n, ch);
            let lh = x.plane(n, c + ch);
            let hl = x.plane(n, 2 * c + ch);
            let hh = x.plane(n, 3 * c + ch);
            let dst = &mut out[(n * c + ch) * out_shape.plane()..][..out_shape.plane()];
            for y in 0..s.h {
                for xx in 0..s.w {
                    let i = y * s.w + xx;
                    let (l, v, h, d) = (ll[i], lh[i], hl[i], hh[i]);
                    dst[2 * y * ow + 2 * xx] = (l + v + h + d) * half;
                    dst[2 * y * ow + 2 * xx + 1] = (l + v - h - d) * half;
                    dst[(2 * y + 1) * ow + 2 * xx] = (l - v + h - d) * half;
                    dst[(2 * y + 1) * ow + 2 * xx + 1] = (l - v - h + d) * half;
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

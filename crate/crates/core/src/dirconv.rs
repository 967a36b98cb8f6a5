//! Detail-augmented convolution: five 3×3 branches (plain, central
//! difference, angular difference, horizontal and vertical directional
//! difference) whose kernels are fused into one by learnable coefficients.
//!
//! Because every branch transform is linear in its kernel, the fused layer
//! `x ⊛ Σ αₖ Tₖ(wₖ) + Σ αₖ bₖ` equals the sum of the five branch outputs.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d, ConvGeom, Scalar, Shape, Tensor};

/// Vertical directional mask (Scharr weights, upper row positive).
pub const MASK_V: [[f64; 3]; 3] =
    [[3.0 / 16.0, 10.0 / 16.0, 3.0 / 16.0], [0.0, 0.0, 0.0], [-3.0 / 16.0, -10.0 / 16.0, -3.0 / 16.0]];

/// Horizontal directional mask, the transpose of [`MASK_V`].
pub const MASK_H: [[f64; 3]; 3] =
    [[3.0 / 16.0, 0.0, -3.0 / 16.0], [10.0 / 16.0, 0.0, -10.0 / 16.0], [3.0 / 16.0, 0.0, -3.0 / 16.0]];

/// Ring of a 3×3 kernel, clockwise from the top-left tap (flat indices).
const RING: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];
const CENTER: usize = 4;

/// Initial fusion coefficients: identity-dominant.
pub const ALPHA_INIT: [f64; 5] = [1.0, 0.1, 0.1, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Conv,
    Cdc,
    Adc,
    Hmdc,
    Vmdc,
}

impl Branch {
    pub const ALL: [Branch; 5] = [Branch::Conv, Branch::Cdc, Branch::Adc, Branch::Hmdc, Branch::Vmdc];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Conv => "conv",
            Branch::Cdc => "cdc",
            Branch::Adc => "adc",
            Branch::Hmdc => "hmdc",
            Branch::Vmdc => "vmdc",
        }
    }
}

fn check_3x3(s: Shape) -> Result<()> {
    if s.h != 3 || s.w != 3 {
        return Err(Error::NotThreeByThree { kh: s.h, kw: s.w });
    }
    Ok(())
}

fn per_slice<T: Scalar>(w: &Tensor<T>, f: impl Fn(&[T], &mut [T])) -> Result<Tensor<T>> {
    check_3x3(w.shape())?;
    let mut out = vec![T::zero(); w.numel()];
    for (src, dst) in w.data().chunks(9).zip(out.chunks_mut(9)) {
        f(src, dst);
    }
    Ok(Tensor::from_raw(w.shape(), out))
}

/// Central difference: subtracts the tap sum at the center, so the kernel sums to zero.
pub fn cdc_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    per_slice(w, |src, dst| {
        let sum = src.iter().fold(T::zero(), |a, &v| a + v);
        dst.copy_from_slice(src);
        dst[CENTER] = dst[CENTER] - sum;
    })
}

/// Angular difference: each ring tap becomes `wᵢ − w_prev(i)` (clockwise), center zero.
pub fn adc_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    per_slice(w, |src, dst| {
        for i in 0..8 {
            let prev = RING[(i + 7) % 8];
            dst[RING[i]] = src[RING[i]] - src[prev];
        }
        dst[CENTER] = T::zero();
    })
}

fn masked<T: Scalar>(w: &Tensor<T>, mask: &[[f64; 3]; 3]) -> Result<Tensor<T>> {
    let m: Vec<T> = mask.iter().flatten().map(|&v| T::lit(v)).collect();
    per_slice(w, |src, dst| {
        for i in 0..9 {
            dst[i] = src[i] * m[i];
        }
    })
}

pub fn hmdc_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    masked(w, &MASK_H)
}

pub fn vmdc_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    masked(w, &MASK_V)
}

/// Applies the kernel transform of `branch`.
pub fn transform<T: Scalar>(w: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
    match branch {
        Branch::Conv => {
            check_3x3(w.shape())?;
            Ok(w.clone())
        }
        Branch::Cdc => cdc_kernel(w),
        Branch::Adc => adc_kernel(w),
        Branch::Hmdc => hmdc_kernel(w),
        Branch::Vmdc => vmdc_kernel(w),
    }
}

/// Adjoint of [`transform`], used to pull kernel gradients back to branch weights.
pub fn transform_adjoint<T: Scalar>(g: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
    match branch {
        Branch::Conv => {
            check_3x3(g.shape())?;
            Ok(g.clone())
        }
        Branch::Cdc => per_slice(g, |src, dst| {
            for i in 0..9 {
                dst[i] = src[i] - src[CENTER];
            }
        }),
        Branch::Adc => per_slice(g, |src, dst| {
            for i in 0..8 {
                let next = RING[(i + 1) % 8];
                dst[RING[i]] = src[RING[i]] - src[next];
            }
            dst[CENTER] = T::zero();
        }),
        // elementwise masks are self-adjoint
        Branch::Hmdc => hmdc_kernel(g),
        Branch::Vmdc => vmdc_kernel(g),
    }
}

/// Parameters of one detail-augmented convolution layer.
#[derive(Debug, Clone)]
pub struct DacParams<T: Scalar = f32> {
    /// Branch kernels `(c_out, c_in, 3, 3)` in [`Branch::ALL`] order.
    pub weights: [Tensor<T>; 5],
    /// Branch biases `(1, c_out, 1, 1)`.
    pub biases: [Tensor<T>; 5],
    pub alpha: [T; 5],
}

impl<T: Scalar> DacParams<T> {
    pub fn validate(&self) -> Result<()> {
        let ks = self.weights[0].shape();
        check_3x3(ks)?;
        for w in &self.weights {
            if w.shape() != ks {
                return Err(shape_err(format!("branch kernels differ: {ks} vs {}", w.shape())));
            }
        }
        for b in &self.biases {
            if b.numel() != ks.n {
                return Err(shape_err(format!("branch bias has {} entries for {} outputs", b.numel(), ks.n)));
            }
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }
}

/// Folds the five branches into one kernel and bias.
pub fn dac_fuse<T: Scalar>(p: &DacParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    p.validate()?;
    let ks = p.weights[0].shape();
    let mut kernel = vec![T::zero(); ks.numel()];
    let mut bias = vec![T::zero(); ks.n];
    for (k, branch) in Branch::ALL.into_iter().enumerate() {
        let t = transform(&p.weights[k], branch)?;
        let a = p.alpha[k];
        for (d, &v) in kernel.iter_mut().zip(t.data()) {
            *d = *d + a * v;
        }
        for (d, &v) in bias.iter_mut().zip(p.biases[k].data()) {
            *d = *d + a * v;
        }
    }
    Ok((Tensor::from_raw(ks, kernel), Tensor::from_raw(Shape::new(1, ks.n, 1, 1), bias)))
}

/// Runs the fused 3×3 convolution (stride 1, padding 1).
pub fn dac_forward<T: Scalar>(x: &Tensor<T>, p: &DacParams<T>) -> Result<Tensor<T>> {
    let (kernel, bias) = dac_fuse(p)?;
    conv2d(x, &kernel, Some(&bias), ConvGeom::same(3, 1))
}

/// Unfused reference: `Σₖ αₖ (x ⊛ Tₖ(wₖ) + bₖ)`.
pub fn dac_branch_sum<T: Scalar>(x: &Tensor<T>, p: &DacParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let mut acc: Option<Vec<T>> = None;
    let mut shape = x.shape();
    for (k, branch) in Branch::ALL.into_iter().enumerate() {
        let y = conv2d(x, &transform(&p.weights[k], branch)?, Some(&p.biases[k]), ConvGeom::same(3, 1))?;
        shape = y.shape();
        let a = p.alpha[k];
        match &mut acc {
            None => acc = Some(y.data().iter().map(|&v| a * v).collect()),
            Some(buf) => {
                for (d, &v) in buf.iter_mut().zip(y.data()) {
                    *d = *d + a * v;
                }
            }
        }
    }
    Ok(Tensor::from_raw(shape, acc.unwrap_or_default()))
}

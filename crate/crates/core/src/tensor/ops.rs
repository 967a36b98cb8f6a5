//! Non-convolution tensor kernels and the backward rules that go with them.

use super::{Scalar, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

// ---------------------------------------------------------------------------
// sub-pixel rearrangement

/// Sub-pixel upsampling: `out[n, k, y·r + i, x·r + j] = in[n, k·r² + i·r + j, y, x]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::ChannelNotDivisible { channels: s.c, factor: r * r });
    }
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut out = vec![T::zero(); s.numel()];
    let xd = x.data();
    for n in 0..s.n {
        for k in 0..out_shape.c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = k * r * r + i * r + j;
                    for y in 0..s.h {
                        let src = &xd[s.offset(n, src_c, y, 0)..][..s.w];
                        let row = out_shape.offset(n, k, y * r + i, 0);
                        for (xx, &v) in src.iter().enumerate() {
                            out[row + xx * r + j] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::SpatialNotDivisible { h: s.h, w: s.w, factor: r });
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = vec![T::zero(); s.numel()];
    let xd = x.data();
    for n in 0..s.n {
        for k in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = k * r * r + i * r + j;
                    for y in 0..out_shape.h {
                        let row = s.offset(n, k, y * r + i, 0);
                        let dst = out_shape.offset(n, dst_c, y, 0);
                        for xx in 0..out_shape.w {
                            out[dst + xx] = xd[row + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn pool_out(s: Shape, k: usize, stride: usize) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 || k > s.h || k > s.w {
        return Err(Error::EmptyOutput(format!("pool window {k} on {}x{}", s.h, s.w)));
    }
    Ok(((s.h - k) / stride + 1, (s.w - k) / stride + 1))
}

/// Unpadded window pooling; average pooling divides by exactly `k²`.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, kind: PoolKind, k: usize, stride: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (oh, ow) = pool_out(s, k, stride)?;
    let inv = T::one() / T::from_usize_lossy(k * k);
    let out = Tensor::from_fn(s.with_hw(oh, ow), |n, c, y, xo| {
        let mut acc = match kind {
            PoolKind::Max => T::neg_infinity(),
            PoolKind::Avg => T::zero(),
        };
        for dy in 0..k {
            for dx in 0..k {
                let v = x.at(n, c, y * stride + dy, xo * stride + dx);
                acc = match kind {
                    PoolKind::Max => {
                        if v > acc {
                            v
                        } else {
                            acc
                        }
                    }
                    PoolKind::Avg => acc + v,
                };
            }
        }
        match kind {
            PoolKind::Max => acc,
            PoolKind::Avg => acc * inv,
        }
    });
    Ok(out)
}

/// Max pooling routes each window's gradient to the first maximal element.
pub fn pool2d_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (oh, ow) = pool_out(s, k, stride)?;
    if grad_out.shape() != s.with_hw(oh, ow) {
        return Err(shape_err("pool gradient shape"));
    }
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut gx = Tensor::zeros(s);
    let gd = gx.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for xo in 0..ow {
                    let g = grad_out.at(n, c, y, xo);
                    match kind {
                        PoolKind::Avg => {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let off = s.offset(n, c, y * stride + dy, xo * stride + dx);
                                    gd[off] = gd[off] + g * inv;
                                }
                            }
                        }
                        PoolKind::Max => {
                            let mut best = s.offset(n, c, y * stride, xo * stride);
                            let mut best_v = x.data()[best];
                            for dy in 0..k {
                                for dx in 0..k {
                                    let off = s.offset(n, c, y * stride + dy, xo * stride + dx);
                                    if x.data()[off] > best_v {
                                        best_v = x.data()[off];
                                        best = off;
                                    }
                                }
                            }
                            gd[best] = gd[best] + g;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// `(n, 2, h, w)` map of the per-pixel channel maximum and channel mean.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let inv = T::one() / T::from_usize_lossy(s.c.max(1));
    let mut out = vec![T::zero(); s.n * 2 * p];
    for n in 0..s.n {
        let (max_plane, mean_plane) = out[n * 2 * p..(n + 1) * 2 * p].split_at_mut(p);
        max_plane.copy_from_slice(x.plane(n, 0));
        mean_plane.copy_from_slice(x.plane(n, 0));
        for c in 1..s.c {
            for ((m, a), &v) in max_plane.iter_mut().zip(mean_plane.iter_mut()).zip(x.plane(n, c)) {
                if v > *m {
                    *m = v;
                }
                *a = *a + v;
            }
        }
        for a in mean_plane.iter_mut() {
            *a = *a * inv;
        }
    }
    Tensor::from_raw(s.with_c(2), out)
}

pub fn channel_stats_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let inv = T::one() / T::from_usize_lossy(s.c.max(1));
    let mut gx = Tensor::zeros(s);
    let gd = gx.data_mut();
    for n in 0..s.n {
        let g_max = grad_out.plane(n, 0);
        let g_mean = grad_out.plane(n, 1);
        for i in 0..p {
            let mut best_c = 0;
            let mut best_v = x.plane(n, 0)[i];
            for c in 1..s.c {
                let v = x.plane(n, c)[i];
                if v > best_v {
                    best_v = v;
                    best_c = c;
                }
            }
            for c in 0..s.c {
                let off = (n * s.c + c) * p + i;
                gd[off] = g_mean[i] * inv;
            }
            let off = (n * s.c + best_c) * p + i;
            gd[off] = gd[off] + g_max[i];
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// bilinear resize (align_corners = false)

/// Source taps `(i0, i1, frac)` for each output index. Source coordinate is
/// `(dst + 0.5)·in/out − 0.5`, clamped below at 0; `i1` is clamped to the edge.
fn linear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(shape_err(format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = linear_taps::<T>(s.h, out_h);
    let tx = linear_taps::<T>(s.w, out_w);
    let one = T::one();
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for &(y0, y1, fy) in &ty {
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                for &(x0, x1, fx) in &tx {
                    let top = r0[x0] * (one - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                    out.push(top * (one - fy) + bot * fy);
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

pub fn resize_bilinear_backward<T: Scalar>(grad_out: &Tensor<T>, input: Shape) -> Tensor<T> {
    let go = grad_out.shape();
    if (go.h, go.w) == (input.h, input.w) {
        return grad_out.clone();
    }
    let ty = linear_taps::<T>(input.h, go.h);
    let tx = linear_taps::<T>(input.w, go.w);
    let one = T::one();
    let mut gx = Tensor::zeros(input);
    let p = input.plane();
    let gd = gx.data_mut();
    for n in 0..input.n {
        for c in 0..input.c {
            let dst = &mut gd[(n * input.c + c) * p..][..p];
            let src = grad_out.plane(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = src[oy * go.w + ox];
                    let gt = g * (one - fy);
                    let gb = g * fy;
                    dst[y0 * input.w + x0] = dst[y0 * input.w + x0] + gt * (one - fx);
                    dst[y0 * input.w + x1] = dst[y0 * input.w + x1] + gt * fx;
                    dst[y1 * input.w + x0] = dst[y1 * input.w + x0] + gb * (one - fx);
                    dst[y1 * input.w + x1] = dst[y1 * input.w + x1] + gb * fx;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// elementwise algebra

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Whether `b` is accepted against `a`: identical shapes, or `b` is a
/// single-channel `(n, 1, h, w)` map broadcast over the channels of `a`.
fn broadcast_ok(a: Shape, b: Shape) -> bool {
    a == b || (b.c == 1 && a.with_c(1) == b)
}

pub fn ewise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if !broadcast_ok(sa, sb) {
        return Err(shape_err(format!("elementwise {op:?} of {sa} and {sb}")));
    }
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_raw(sa, data));
    }
    let p = sa.plane();
    let mut out = Vec::with_capacity(sa.numel());
    for n in 0..sa.n {
        let bp = b.plane(n, 0);
        for c in 0..sa.c {
            out.extend(a.plane(n, c).iter().zip(bp).map(|(&x, &y)| f(x, y)));
        }
    }
    debug_assert_eq!(out.len(), sa.n * sa.c * p);
    Ok(Tensor::from_raw(sa, out))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ewise(a, b, BinaryOp::Add)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ewise(a, b, BinaryOp::Sub)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ewise(a, b, BinaryOp::Mul)
}

/// Sums a full-size gradient down to the shape of a broadcast operand.
pub fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    let s = g.shape();
    if s == target {
        return g.clone();
    }
    debug_assert!(target.c == 1 && s.with_c(1) == target);
    let p = s.plane();
    let mut out = vec![T::zero(); target.numel()];
    for n in 0..s.n {
        let dst = &mut out[n * p..(n + 1) * p];
        for c in 0..s.c {
            for (d, &v) in dst.iter_mut().zip(g.plane(n, c)) {
                *d = *d + v;
            }
        }
    }
    Tensor::from_raw(target, out)
}

pub fn scalar_mul<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<T: Scalar>(x: &Tensor<T>, f: Activation) -> Tensor<T> {
    match f {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// channel bookkeeping

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err("concat of zero tensors"))?.shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err(format!("concat of {first} and {s}")));
        }
    }
    let total_c: usize = parts.iter().map(|p| p.shape().c).sum();
    let out_shape = first.with_c(total_c);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            let per_sample = p.shape().c * first.plane();
            out.extend_from_slice(&p.data()[n * per_sample..(n + 1) * per_sample]);
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::BadSplit(format!("channels [{start}, {}) of {s}", start + len)));
    }
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let from = (n * s.c + start) * p;
        out.extend_from_slice(&x.data()[from..from + len * p]);
    }
    Ok(Tensor::from_raw(s.with_c(len), out))
}

/// Splits into channels `[0, at)` and `[at, c)`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.shape().c;
    if at == 0 || at >= c {
        return Err(Error::BadSplit(format!("split point {at} outside (0, {c})")));
    }
    Ok((slice_channels(x, 0, at)?, slice_channels(x, at, c - at)?))
}

/// Adjoint of [`slice_channels`]: embeds `g` at channel offset `start` of
/// an otherwise-zero tensor.
pub fn embed_channels<T: Scalar>(g: &Tensor<T>, start: usize, full: Shape) -> Tensor<T> {
    let s = g.shape();
    let p = full.plane();
    let mut out = vec![T::zero(); full.numel()];
    for n in 0..full.n {
        let to = (n * full.c + start) * p;
        out[to..to + s.c * p].copy_from_slice(&g.data()[n * s.c * p..(n + 1) * s.c * p]);
    }
    Tensor::from_raw(full, out)
}

// ---------------------------------------------------------------------------
// padding and cropping

/// Per-side padding amounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub const fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Pad { top, bottom, left, right }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pad::default()
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

/// Mirror padding without repeating the edge sample (`[a b c] → b [a b c] b`).
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, pad: Pad) -> Result<Tensor<T>> {
    let s = x.shape();
    if pad.top >= s.h || pad.bottom >= s.h || pad.left >= s.w || pad.right >= s.w {
        return Err(Error::BadPad(format!("reflect pad {pad:?} on {}x{}", s.h, s.w)));
    }
    if pad.is_zero() {
        return Ok(x.clone());
    }
    let oh = s.h + pad.top + pad.bottom;
    let ow = s.w + pad.left + pad.right;
    let cols: Vec<usize> = (0..ow).map(|xo| reflect_index(xo as isize - pad.left as isize, s.w)).collect();
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for yo in 0..oh {
                let y = reflect_index(yo as isize - pad.top as isize, s.h);
                let row = &src[y * s.w..(y + 1) * s.w];
                out.extend(cols.iter().map(|&xi| row[xi]));
            }
        }
    }
    Ok(Tensor::from_raw(s.with_hw(oh, ow), out))
}

pub fn pad_reflect_backward<T: Scalar>(grad_out: &Tensor<T>, input: Shape, pad: Pad) -> Tensor<T> {
    let go = grad_out.shape();
    let mut gx = Tensor::zeros(input);
    let p = input.plane();
    let gd = gx.data_mut();
    for n in 0..input.n {
        for c in 0..input.c {
            let dst = &mut gd[(n * input.c + c) * p..][..p];
            let src = grad_out.plane(n, c);
            for yo in 0..go.h {
                let y = reflect_index(yo as isize - pad.top as isize, input.h);
                for xo in 0..go.w {
                    let xi = reflect_index(xo as isize - pad.left as isize, input.w);
                    dst[y * input.w + xi] = dst[y * input.w + xi] + src[yo * go.w + xo];
                }
            }
        }
    }
    gx
}

/// The `h × w` window whose top-left corner is `(top, left)`.
pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
        return Err(Error::BadPad(format!("crop {h}x{w} at ({top}, {left}) from {}x{}", s.h, s.w)));
    }
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for y in top..top + h {
                out.extend_from_slice(&src[y * s.w + left..y * s.w + left + w]);
            }
        }
    }
    Ok(Tensor::from_raw(s.with_hw(h, w), out))
}

pub fn crop_backward<T: Scalar>(grad_out: &Tensor<T>, input: Shape, top: usize, left: usize) -> Tensor<T> {
    let go = grad_out.shape();
    let mut gx = Tensor::zeros(input);
    let p = input.plane();
    let gd = gx.data_mut();
    for n in 0..input.n {
        for c in 0..input.c {
            let dst = &mut gd[(n * input.c + c) * p..][..p];
            let src = grad_out.plane(n, c);
            for y in 0..go.h {
                dst[(top + y) * input.w + left..][..go.w].copy_from_slice(&src[y * go.w..(y + 1) * go.w]);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// reductions and broadcasts

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceAxes {
    /// Everything, producing `(1, 1, 1, 1)`.
    All,
    /// Height and width per `(n, c)`, producing `(n, c, 1, 1)`.
    Spatial,
}

pub fn reduce_mean<T: Scalar>(x: &Tensor<T>, axes: ReduceAxes) -> Tensor<T> {
    let s = x.shape();
    match axes {
        ReduceAxes::All => {
            let mean = x.sum() / T::from_usize_lossy(s.numel().max(1));
            Tensor::scalar(mean)
        }
        ReduceAxes::Spatial => {
            let inv = T::one() / T::from_usize_lossy(s.plane().max(1));
            let data = x.data().chunks(s.plane().max(1)).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv);
            Tensor::from_raw(s.with_hw(1, 1), data.take(s.n * s.c).collect())
        }
    }
}

/// Repeats a `(n, c, 1, 1)` tensor over an `h × w` plane.
pub fn expand_spatial<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 {
        return Err(shape_err(format!("expand_spatial needs (n, c, 1, 1), got {s}")));
    }
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for &v in x.data() {
        out.extend(std::iter::repeat_n(v, h * w));
    }
    Ok(Tensor::from_raw(s.with_hw(h, w), out))
}

//! Convolution kernels: im2col + GEMM for dense and grouped convolutions,
//! a direct loop for depthwise ones, and the two backward passes. The
//! transposed convolution is the input-gradient pass of `conv2d`.
//!
//! Semantics are cross-correlation (no kernel flip) with zero padding:
//! `out[n, o, y, x] = b[o] + Σ_{i, dy, dx} w[o, i, dy, dx] · in[n, g·cin_g + i, y·s + dy − p, x·s + dx − p]`.

use super::{Scalar, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Stride, zero padding and group count shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeom { stride, padding, groups }
    }

    /// Stride 1 with padding `(k - 1) / 2`, keeping spatial size for odd `k`.
    pub const fn same(k: usize, groups: usize) -> Self {
        ConvGeom { stride: 1, padding: (k - 1) / 2, groups }
    }
}

/// A kernel `(c_out, c_in / groups, kh, kw)` with its bias and geometry.
#[derive(Debug, Clone)]
pub struct ConvSpec<T: Scalar = f32> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, geom: ConvGeom) -> Result<Self> {
        let k = kernel.shape();
        if geom.stride == 0 || geom.groups == 0 {
            return Err(shape_err("stride and groups must be positive"));
        }
        if !k.n.is_multiple_of(geom.groups) {
            return Err(Error::ChannelNotDivisible { channels: k.n, factor: geom.groups });
        }
        if let Some(b) = &bias {
            if b.numel() != k.n {
                return Err(shape_err(format!("bias has {} entries for {} outputs", b.numel(), k.n)));
            }
        }
        Ok(ConvSpec { kernel, bias, geom })
    }

    /// Size-preserving spec; the kernel must be odd-sized and square.
    pub fn same(kernel: Tensor<T>, bias: Option<Tensor<T>>, groups: usize) -> Result<Self> {
        let k = kernel.shape();
        if k.h != k.w || k.h.is_multiple_of(2) {
            return Err(shape_err(format!("same padding needs an odd square kernel, got {}x{}", k.h, k.w)));
        }
        Self::new(kernel, bias, ConvGeom::same(k.h, groups))
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c * self.geom.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel, self.bias.as_ref(), self.geom)
    }
}

#[derive(Clone, Copy)]
struct Plan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Plan {
    fn new(input: Shape, kernel: Shape, geom: ConvGeom) -> Result<Self> {
        let ConvGeom { stride, padding, groups } = geom;
        if stride == 0 || groups == 0 {
            return Err(shape_err("stride and groups must be positive"));
        }
        if !kernel.n.is_multiple_of(groups) {
            return Err(Error::ChannelNotDivisible { channels: kernel.n, factor: groups });
        }
        if input.c != kernel.c * groups {
            return Err(shape_err(format!(
                "input has {} channels, kernel {} expects {} (groups = {groups})",
                input.c,
                kernel,
                kernel.c * groups
            )));
        }
        let ph = input.h + 2 * padding;
        let pw = input.w + 2 * padding;
        if ph < kernel.h || pw < kernel.w || kernel.h == 0 || kernel.w == 0 {
            return Err(Error::EmptyOutput(format!("kernel {}x{} on padded input {ph}x{pw}", kernel.h, kernel.w)));
        }
        Ok(Plan {
            n: input.n,
            cin: input.c,
            h: input.h,
            w: input.w,
            cout: kernel.n,
            groups,
            cin_g: kernel.c,
            cout_g: kernel.n / groups,
            kh: kernel.h,
            kw: kernel.w,
            oh: (ph - kernel.h) / stride + 1,
            ow: (pw - kernel.w) / stride + 1,
            stride,
            pad: padding,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Input column range `[x0, x1)` of outputs whose tap `dx` lands inside the image.
    fn valid_out_range(&self, d: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // ix = ox * s + d - p must lie in [0, in_len)
        let s = self.stride;
        let lo = if d >= self.pad { 0 } else { (self.pad - d).div_ceil(s) };
        let hi_num = in_len + self.pad;
        let hi = if hi_num > d { (hi_num - d - 1) / s + 1 } else { 0 };
        (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
    }

    /// Unfolds the `cin_g` channels of group `g` in sample `n` into a
    /// `(cin_g·kh·kw) × (oh·ow)` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], n: usize, g: usize, col: &mut [T]) {
        let plane = self.in_plane();
        let p_out = self.out_plane();
        let (ox_lo, ox_hi) = (0..self.kw).map(|dx| self.valid_out_range(dx, self.ow, self.w)).fold(
            (Vec::new(), Vec::new()),
            |(mut a, mut b), (lo, hi)| {
                a.push(lo);
                b.push(hi);
                (a, b)
            },
        );
        for ci in 0..self.cin_g {
            let src = &x[(n * self.cin + g * self.cin_g + ci) * plane..][..plane];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let dst = &mut col[row * p_out..(row + 1) * p_out];
                    for oy in 0..self.oh {
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..][..self.w];
                        let (lo, hi) = (ox_lo[dx], ox_hi[dx]);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi <= lo {
                            continue;
                        }
                        if self.stride == 1 {
                            let start = lo + dx - self.pad;
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                out_row[ox] = src_row[ox * self.stride + dx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: scatter-adds a column matrix back into
    /// the input-gradient planes of group `g`, sample `n`.
    fn col2im<T: Scalar>(&self, col: &[T], n: usize, g: usize, gx: &mut [T]) {
        let plane = self.in_plane();
        let p_out = self.out_plane();
        for ci in 0..self.cin_g {
            let dst = &mut gx[(n * self.cin + g * self.cin_g + ci) * plane..][..plane];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let (lo, hi) = self.valid_out_range(dx, self.ow, self.w);
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let src = &col[row * p_out..(row + 1) * p_out];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..][..self.w];
                        let src_row = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in lo..hi {
                            let ix = ox * self.stride + dx - self.pad;
                            dst_row[ix] = dst_row[ix] + src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = Plan::new(x.shape(), kernel.shape(), geom)?;
    if let Some(b) = bias {
        if b.numel() != plan.cout {
            return Err(shape_err(format!("bias has {} entries for {} outputs", b.numel(), plan.cout)));
        }
    }
    let mut out = vec![T::zero(); plan.out_shape().numel()];
    let xd = x.data();
    let wd = kernel.data();
    let p_out = plan.out_plane();
    if plan.is_depthwise() {
        depthwise_forward(&plan, xd, wd, &mut out);
    } else {
        let k = plan.col_rows();
        let mut col = if plan.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p_out] };
        for n in 0..plan.n {
            for g in 0..plan.groups {
                let w_g = &wd[g * plan.cout_g * k..(g + 1) * plan.cout_g * k];
                let o_start = (n * plan.cout + g * plan.cout_g) * p_out;
                let out_g = &mut out[o_start..o_start + plan.cout_g * p_out];
                let cols: &[T] = if plan.is_pointwise() {
                    let s = (n * plan.cin + g * plan.cin_g) * p_out;
                    &xd[s..s + k * p_out]
                } else {
                    plan.im2col(xd, n, g, &mut col);
                    &col
                };
                let pi = p_out as isize;
                T::gemm(
                    plan.cout_g,
                    k,
                    p_out,
                    T::one(),
                    w_g,
                    (k as isize, 1),
                    cols,
                    (pi, 1),
                    T::zero(),
                    out_g,
                    (pi, 1),
                );
            }
        }
    }
    if let Some(b) = bias {
        let bd = b.data();
        for (i, chunk) in out.chunks_mut(p_out).enumerate() {
            let bv = bd[i % plan.cout];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
    Ok(Tensor::from_raw(plan.out_shape(), out))
}

fn depthwise_forward<T: Scalar>(plan: &Plan, xd: &[T], wd: &[T], out: &mut [T]) {
    let plane = plan.in_plane();
    let p_out = plan.out_plane();
    let taps = plan.kh * plan.kw;
    for n in 0..plan.n {
        for c in 0..plan.cout {
            let src = &xd[(n * plan.cin + c) * plane..][..plane];
            let dst = &mut out[(n * plan.cout + c) * p_out..][..p_out];
            let wk = &wd[c * taps..(c + 1) * taps];
            for dy in 0..plan.kh {
                for dx in 0..plan.kw {
                    let wv = wk[dy * plan.kw + dx];
                    let (lo, hi) = plan.valid_out_range(dx, plan.ow, plan.w);
                    for oy in 0..plan.oh {
                        let iy = (oy * plan.stride + dy) as isize - plan.pad as isize;
                        if iy < 0 || iy >= plan.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * plan.w..][..plan.w];
                        let dst_row = &mut dst[oy * plan.ow..(oy + 1) * plan.ow];
                        for ox in lo..hi {
                            let ix = ox * plan.stride + dx - plan.pad;
                            dst_row[ox] = dst_row[ox] + wv * src_row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d` with respect to its input of shape `input`.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input: Shape,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = Plan::new(input, kernel.shape(), geom)?;
    if grad_out.shape() != plan.out_shape() {
        return Err(shape_err(format!(
            "output gradient {} does not match conv output {}",
            grad_out.shape(),
            plan.out_shape()
        )));
    }
    let mut gx = vec![T::zero(); input.numel()];
    let god = grad_out.data();
    let wd = kernel.data();
    let p_out = plan.out_plane();
    if plan.is_depthwise() {
        let plane = plan.in_plane();
        let taps = plan.kh * plan.kw;
        for n in 0..plan.n {
            for c in 0..plan.cout {
                let src = &god[(n * plan.cout + c) * p_out..][..p_out];
                let dst = &mut gx[(n * plan.cin + c) * plane..][..plane];
                let wk = &wd[c * taps..(c + 1) * taps];
                for dy in 0..plan.kh {
                    for dx in 0..plan.kw {
                        let wv = wk[dy * plan.kw + dx];
                        let (lo, hi) = plan.valid_out_range(dx, plan.ow, plan.w);
                        for oy in 0..plan.oh {
                            let iy = (oy * plan.stride + dy) as isize - plan.pad as isize;
                            if iy < 0 || iy >= plan.h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * plan.w..][..plan.w];
                            let src_row = &src[oy * plan.ow..(oy + 1) * plan.ow];
                            for ox in lo..hi {
                                let ix = ox * plan.stride + dx - plan.pad;
                                dst_row[ix] = dst_row[ix] + wv * src_row[ox];
                            }
                        }
                    }
                }
            }
        }
        return Ok(Tensor::from_raw(input, gx));
    }
    let k = plan.col_rows();
    let pi = p_out as isize;
    let ki = k as isize;
    let mut col = if plan.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p_out] };
    for n in 0..plan.n {
        for g in 0..plan.groups {
            let w_g = &wd[g * plan.cout_g * k..(g + 1) * plan.cout_g * k];
            let go_start = (n * plan.cout + g * plan.cout_g) * p_out;
            let go_g = &god[go_start..go_start + plan.cout_g * p_out];
            if plan.is_pointwise() {
                let s = (n * plan.cin + g * plan.cin_g) * p_out;
                let dst = &mut gx[s..s + k * p_out];
                T::gemm(k, plan.cout_g, p_out, T::one(), w_g, (1, ki), go_g, (pi, 1), T::zero(), dst, (pi, 1));
            } else {
                T::gemm(k, plan.cout_g, p_out, T::one(), w_g, (1, ki), go_g, (pi, 1), T::zero(), &mut col, (pi, 1));
                plan.col2im(&col, n, g, &mut gx);
            }
        }
    }
    Ok(Tensor::from_raw(input, gx))
}

/// Gradient of `conv2d` with respect to its kernel of shape `kernel`.
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel: Shape,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = Plan::new(x.shape(), kernel, geom)?;
    if grad_out.shape() != plan.out_shape() {
        return Err(shape_err(format!(
            "output gradient {} does not match conv output {}",
            grad_out.shape(),
            plan.out_shape()
        )));
    }
    let mut gw = vec![T::zero(); kernel.numel()];
    let xd = x.data();
    let god = grad_out.data();
    let p_out = plan.out_plane();
    if plan.is_depthwise() {
        let plane = plan.in_plane();
        let taps = plan.kh * plan.kw;
        for n in 0..plan.n {
            for c in 0..plan.cout {
                let src = &xd[(n * plan.cin + c) * plane..][..plane];
                let go = &god[(n * plan.cout + c) * p_out..][..p_out];
                for dy in 0..plan.kh {
                    for dx in 0..plan.kw {
                        let (lo, hi) = plan.valid_out_range(dx, plan.ow, plan.w);
                        let mut acc = T::zero();
                        for oy in 0..plan.oh {
                            let iy = (oy * plan.stride + dy) as isize - plan.pad as isize;
                            if iy < 0 || iy >= plan.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * plan.w..][..plan.w];
                            let go_row = &go[oy * plan.ow..(oy + 1) * plan.ow];
                            for ox in lo..hi {
                                acc = acc + go_row[ox] * src_row[ox * plan.stride + dx - plan.pad];
                            }
                        }
                        let slot = &mut gw[c * taps + dy * plan.kw + dx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
        return Ok(Tensor::from_raw(kernel, gw));
    }
    let k = plan.col_rows();
    let pi = p_out as isize;
    let ki = k as isize;
    let mut col = if plan.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p_out] };
    for n in 0..plan.n {
        for g in 0..plan.groups {
            let go_start = (n * plan.cout + g * plan.cout_g) * p_out;
            let go_g = &god[go_start..go_start + plan.cout_g * p_out];
            let cols: &[T] = if plan.is_pointwise() {
                let s = (n * plan.cin + g * plan.cin_g) * p_out;
                &xd[s..s + k * p_out]
            } else {
                plan.im2col(xd, n, g, &mut col);
                &col
            };
            let gw_g = &mut gw[g * plan.cout_g * k..(g + 1) * plan.cout_g * k];
            T::gemm(plan.cout_g, p_out, k, T::one(), go_g, (pi, 1), cols, (1, pi), T::one(), gw_g, (ki, 1));
        }
    }
    Ok(Tensor::from_raw(kernel, gw))
}

/// Per-channel sum of an output gradient, shaped `(1, c, 1, 1)`.
pub fn conv2d_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let mut gb = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, slot) in gb.iter_mut().enumerate() {
            let sum = grad_out.plane(n, c).iter().fold(T::zero(), |a, &v| a + v);
            *slot = *slot + sum;
        }
    }
    Tensor::from_raw(Shape::new(1, s.c, 1, 1), gb)
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    ((len.checked_sub(1)?) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0)
}

/// Transposed convolution: the adjoint of `conv2d` under the same kernel.
///
/// The kernel is laid out `(c_in, c_out / groups, kh, kw)`, i.e. it is the
/// kernel of the forward convolution mapping `c_out` channels to `c_in`.
/// Output side is `(len - 1)·s − 2p + k`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let k = kernel.shape();
    if s.c != k.n {
        return Err(shape_err(format!("transposed conv input has {} channels, kernel {k} expects {}", s.c, k.n)));
    }
    let oh = conv_transpose_out_len(s.h, k.h, geom.stride, geom.padding)
        .ok_or_else(|| Error::EmptyOutput(format!("transposed conv of {s} with kernel {k}")))?;
    let ow = conv_transpose_out_len(s.w, k.w, geom.stride, geom.padding)
        .ok_or_else(|| Error::EmptyOutput(format!("transposed conv of {s} with kernel {k}")))?;
    let out_shape = Shape::new(s.n, k.c * geom.groups, oh, ow);
    let mut out = conv2d_backward_input(x, kernel, out_shape, geom)?;
    if let Some(b) = bias {
        if b.numel() != out_shape.c {
            return Err(shape_err(format!("bias has {} entries for {} outputs", b.numel(), out_shape.c)));
        }
        let bd = b.data().to_vec();
        let p = out_shape.plane();
        for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = bd[i % out_shape.c];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop reference.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeom) -> Tensor<f64> {
        let xs = x.shape();
        let ks = w.shape();
        let oh = (xs.h + 2 * geom.padding - ks.h) / geom.stride + 1;
        let ow = (xs.w + 2 * geom.padding - ks.w) / geom.stride + 1;
        let cout_g = ks.n / geom.groups;
        Tensor::from_fn(Shape::new(xs.n, ks.n, oh, ow), |n, o, y, xo| {
            let g = o / cout_g;
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..ks.c {
                for dy in 0..ks.h {
                    for dx in 0..ks.w {
                        let iy = (y * geom.stride + dy) as isize - geom.padding as isize;
                        let ix = (xo * geom.stride + dx) as isize - geom.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += w.at(o, i, dy, dx) * x.at(n, g * ks.c + i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn ones_on_ones_counts_taps() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, None, ConvGeom::same(3, 1)).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn matches_naive_over_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            (Shape::new(2, 8, 16, 16), Shape::new(6, 8, 3, 3), ConvGeom::new(1, 1, 1)),
            (Shape::new(1, 4, 9, 7), Shape::new(8, 2, 3, 3), ConvGeom::new(2, 1, 2)),
            (Shape::new(2, 4, 8, 8), Shape::new(4, 1, 3, 3), ConvGeom::new(1, 1, 4)),
            (Shape::new(1, 3, 11, 6), Shape::new(5, 3, 1, 1), ConvGeom::new(1, 0, 1)),
            (Shape::new(1, 2, 10, 10), Shape::new(1, 2, 7, 7), ConvGeom::new(1, 3, 1)),
            (Shape::new(1, 4, 5, 5), Shape::new(4, 1, 3, 3), ConvGeom::new(2, 0, 4)),
            (Shape::new(1, 2, 6, 6), Shape::new(3, 2, 4, 4), ConvGeom::new(2, 1, 1)),
        ];
        for (xs, ks, geom) in cases {
            let x = rand_t(xs, &mut rng);
            let w = rand_t(ks, &mut rng);
            let b = rand_t(Shape::new(1, ks.n, 1, 1), &mut rng);
            let fast = conv2d(&x, &w, Some(&b), geom).unwrap();
            let slow = naive(&x, &w, Some(&b), geom);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-10, "{xs} {ks} {geom:?}");
        }
    }

    #[test]
    fn backward_passes_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (Shape::new(2, 4, 7, 6), Shape::new(6, 2, 3, 3), ConvGeom::new(2, 1, 2)),
            (Shape::new(1, 3, 8, 8), Shape::new(3, 1, 3, 3), ConvGeom::new(1, 1, 3)),
            (Shape::new(1, 4, 5, 5), Shape::new(2, 4, 1, 1), ConvGeom::new(1, 0, 1)),
        ];
        for (xs, ks, geom) in cases {
            let x = rand_t(xs, &mut rng);
            let w = rand_t(ks, &mut rng);
            let y = conv2d(&x, &w, None, geom).unwrap();
            let g = rand_t(y.shape(), &mut rng);
            let gx = conv2d_backward_input(&g, &w, xs, geom).unwrap();
            let lhs = y.dot(&g).unwrap();
            assert!((lhs - x.dot(&gx).unwrap()).abs() < 1e-9);
            let gw = conv2d_backward_weight(&x, &g, ks, geom).unwrap();
            assert!((lhs - w.dot(&gw).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_stride_two_tiles() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 2, 2));
        let w = Tensor::<f32>::ones(Shape::new(1, 1, 2, 2));
        let y = conv_transpose2d(&x, &w, None, ConvGeom::new(2, 0, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transposed_k4_s2_p1_doubles() {
        let x = Tensor::<f32>::ones(Shape::new(1, 3, 5, 7));
        let w = Tensor::<f32>::ones(Shape::new(3, 2, 4, 4));
        let y = conv_transpose2d(&x, &w, None, ConvGeom::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 10, 14));
    }

    #[test]
    fn errors_are_reported() {
        let x = Tensor::<f32>::ones(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::ones(Shape::new(2, 2, 3, 3));
        assert!(matches!(conv2d(&x, &w, None, ConvGeom::same(3, 1)), Err(Error::ShapeMismatch(_))));
        let w = Tensor::<f32>::ones(Shape::new(2, 3, 7, 7));
        assert!(matches!(conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)), Err(Error::EmptyOutput(_))));
        let w = Tensor::<f32>::ones(Shape::new(3, 1, 3, 3));
        assert!(matches!(
            conv2d(&Tensor::<f32>::ones(Shape::new(1, 2, 4, 4)), &w, None, ConvGeom::same(3, 2)),
            Err(Error::ChannelNotDivisible { .. })
        ));
    }
}

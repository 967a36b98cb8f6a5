//! Composite layers: residual block, frequency-spatial encoder (FSE and
//! its directional variant), dual residual unit, adaptive selector (FSAS)
//! and flexible attention fusion (FAM).
//!
//! Layers hold [`ParamId`]s only; values live in a [`ParamStore`] and are
//! bound to a tape for each forward pass.

use crate::autograd::{Tape, Var};
use crate::dirconv::{Branch, DacParams, ALPHA_INIT};
use crate::error::{Error, Result};
use crate::params::{Builder, Graph, ParamId, ParamStore};
use crate::tensor::{ConvGeom, Pad, ReduceAxes, Scalar, Shape, Tensor};

/// Subband families handled by the FSE grouped convolution.
pub const SUBBANDS: usize = 4;
/// Kernel size of the single-channel spatial attention maps.
pub const SPATIAL_KERNEL: usize = 7;
/// Channel reduction inside FAM's channel attention.
pub const CHANNEL_REDUCTION: usize = 4;

/// A single-input layer.
pub trait Block {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var>;

    /// Runs the layer on a plain tensor.
    fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut g = store.bind(&mut tape)?;
        let xv = g.tape.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.tape.value(y).clone())
    }
}

/// Convolution (or transposed convolution) with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub transposed: bool,
}

impl Conv {
    /// Kaiming-initialized kernel `(cout, cin/groups, k, k)`, zero bias.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        check_groups(cin, cout, geom.groups)?;
        b.scope(name, |b| {
            let weight = b.kernel("weight", Shape::new(cout, cin / geom.groups, k, k))?;
            let bias = b.vector("bias", &vec![0.0; cout])?;
            Ok(Conv { weight, bias, geom, transposed: false })
        })
    }

    /// Size-preserving odd-kernel convolution.
    pub fn same<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
    ) -> Result<Self> {
        Self::build(b, name, cin, cout, k, ConvGeom::same(k, groups))
    }

    /// Zero kernel and bias.
    pub fn zeroed<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        b.scope(name, |b| {
            let weight = b.zeros_kernel("weight", Shape::new(cout, cin, k, k))?;
            let bias = b.vector("bias", &vec![0.0; cout])?;
            Ok(Conv { weight, bias, geom: ConvGeom::same(k, 1), transposed: false })
        })
    }

    /// Transposed convolution `cin → cout`, kernel `(cin, cout, k, k)`.
    pub fn transposed<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let weight = b.kernel("weight", Shape::new(cin, cout, k, k))?;
            let bias = b.vector("bias", &vec![0.0; cout])?;
            Ok(Conv { weight, bias, geom: ConvGeom::new(stride, padding, 1), transposed: true })
        })
    }
}

fn check_groups(cin: usize, cout: usize, groups: usize) -> Result<()> {
    if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
        return Err(Error::BadConfig(format!("{cin} → {cout} channels not divisible into {groups} groups")));
    }
    Ok(())
}

impl Block for Conv {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.weight), g.p(self.bias));
        if self.transposed {
            g.tape.conv_transpose2d(x, w, Some(b), self.geom)
        } else {
            g.tape.conv2d(x, w, Some(b), self.geom)
        }
    }
}

/// `x + conv₂(relu(conv₁(x)))` with 3×3 convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(ResBlock { conv1: Conv::same(b, "conv1", c, c, 3, 1)?, conv2: Conv::same(b, "conv2", c, c, 3, 1)? })
        })
    }
}

impl Block for ResBlock {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.tape.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        g.tape.add(x, h)
    }
}

/// Detail-augmented convolution: five branch kernels fused on the tape.
#[derive(Debug, Clone)]
pub struct Dac {
    pub weights: [ParamId; 5],
    pub biases: [ParamId; 5],
    pub alpha: ParamId,
}

impl Dac {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        b.scope(name, |b| {
            let mut weights = Vec::with_capacity(5);
            let mut biases = Vec::with_capacity(5);
            for branch in Branch::ALL {
                let (w, bias) = b.scope(branch.name(), |b| {
                    Ok((b.kernel("weight", Shape::new(cout, cin, 3, 3))?, b.vector("bias", &vec![0.0; cout])?))
                })?;
                weights.push(w);
                biases.push(bias);
            }
            let alpha = b.vector("alpha", &ALPHA_INIT)?;
            Ok(Dac {
                weights: weights.try_into().expect("five branches"),
                biases: biases.try_into().expect("five branches"),
                alpha,
            })
        })
    }

    /// Snapshot of this layer's parameters in eager form.
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> DacParams<T> {
        let alpha = store.get(self.alpha).value.data();
        DacParams {
            weights: self.weights.map(|id| store.get(id).value.clone()),
            biases: self.biases.map(|id| store.get(id).value.clone()),
            alpha: std::array::from_fn(|k| alpha[k]),
        }
    }
}

impl Block for Dac {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut kernels = Vec::with_capacity(5);
        for (k, branch) in Branch::ALL.into_iter().enumerate() {
            let w = g.p(self.weights[k]);
            kernels.push(if branch == Branch::Conv { w } else { g.tape.kernel_transform(w, branch)? });
        }
        let alpha = g.p(self.alpha);
        let kernel = g.tape.weighted_sum(&kernels, alpha)?;
        let biases: Vec<Var> = self.biases.iter().map(|&id| g.p(id)).collect();
        let bias = g.tape.weighted_sum(&biases, alpha)?;
        g.tape.conv2d(x, kernel, Some(bias), ConvGeom::same(3, 1))
    }
}

/// Dual residual unit: half the channels refined at full resolution, the
/// other half at half resolution, fused by a 1×1 convolution plus skip.
#[derive(Debug, Clone)]
pub struct Dru {
    pub high: ResBlock,
    pub low: ResBlock,
    pub fuse: Conv,
}

impl Dru {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize) -> Result<Self> {
        if !c.is_multiple_of(2) {
            return Err(Error::OddChannels(c));
        }
        b.scope(name, |b| {
            Ok(Dru {
                high: ResBlock::build(b, "high", c / 2)?,
                low: ResBlock::build(b, "low", c / 2)?,
                fuse: Conv::same(b, "fuse", c, c, 1, 1)?,
            })
        })
    }
}

impl Block for Dru {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x);
        if !s.c.is_multiple_of(2) {
            return Err(Error::OddChannels(s.c));
        }
        let half = s.c / 2;
        let hi = g.tape.slice(x, 0, half)?;
        let lo = g.tape.slice(x, half, half)?;
        let hi = self.high.forward(g, hi)?;
        let lo = g.tape.resize(lo, s.h.div_ceil(2), s.w.div_ceil(2))?;
        let lo = self.low.forward(g, lo)?;
        let lo = g.tape.resize(lo, s.h, s.w)?;
        let cat = g.tape.concat(&[hi, lo])?;
        let fused = self.fuse.forward(g, cat)?;
        g.tape.add(fused, x)
    }
}

/// Optional layer in front of the FSE branches.
#[derive(Debug, Clone)]
pub enum PreConv {
    Plain(Conv),
    Dac(Dac),
}

/// Refinement after the two FSE branches are summed.
#[derive(Debug, Clone)]
pub enum Refine {
    Residual(ResBlock, ResBlock),
    Dru(Dru),
}

/// Frequency-spatial encoder: `R(C_d(F) + IWT(C_g(DWT(F))))`, optionally
/// preceded by a (directional) convolution; with a DAC front and DRU
/// refinement it is the directional encoder (DFSE).
#[derive(Debug, Clone)]
pub struct Fse {
    pub pre: Option<PreConv>,
    pub depthwise: Conv,
    pub subband: Conv,
    pub refine: Refine,
}

/// Structural switches for [`Fse::build`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FseOptions {
    /// `None`: no front layer; `Some(false)`: plain 3×3 conv; `Some(true)`: DAC.
    pub pre: Option<bool>,
    pub dru: bool,
}

impl Fse {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize, opts: FseOptions) -> Result<Self> {
        b.scope(name, |b| {
            let pre = match opts.pre {
                None => None,
                Some(false) => Some(PreConv::Plain(Conv::same(b, "pre.conv", c, c, 3, 1)?)),
                Some(true) => Some(PreConv::Dac(Dac::build(b, "pre", c, c)?)),
            };
            let depthwise = Conv::same(b, "depthwise", c, c, 3, c)?;
            let subband = Conv::same(b, "subband", SUBBANDS * c, SUBBANDS * c, 3, SUBBANDS)?;
            let refine = if opts.dru {
                Refine::Dru(Dru::build(b, "dru", c)?)
            } else {
                Refine::Residual(ResBlock::build(b, "res1", c)?, ResBlock::build(b, "res2", c)?)
            };
            Ok(Fse { pre, depthwise, subband, refine })
        })
    }

    fn core<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = match &self.pre {
            None => x,
            Some(PreConv::Plain(c)) => c.forward(g, x)?,
            Some(PreConv::Dac(d)) => d.forward(g, x)?,
        };
        let spatial = self.depthwise.forward(g, f)?;
        let bands = g.tape.dwt2(f)?;
        let bands = self.subband.forward(g, bands)?;
        let freq = g.tape.iwt2(bands)?;
        let sum = g.tape.add(spatial, freq)?;
        match &self.refine {
            Refine::Residual(r1, r2) => {
                let h = r1.forward(g, sum)?;
                r2.forward(g, h)
            }
            Refine::Dru(d) => d.forward(g, sum),
        }
    }
}

impl Block for Fse {
    /// Odd spatial dims are reflect-padded by one row/column and cropped back.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x);
        let pad = Pad::new(0, s.h % 2, 0, s.w % 2);
        if pad.is_zero() {
            return self.core(g, x);
        }
        let xp = g.tape.pad_reflect(x, pad)?;
        let y = self.core(g, xp)?;
        g.tape.crop(y, 0, 0, s.h, s.w)
    }
}

/// How a guide tensor enters the per-group concatenation of [`PixelAttention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guide {
    /// Channels divided evenly across groups.
    Split,
    /// Every group sees all channels.
    Shared,
}

/// Pixel attention: per-group concatenation of features and guides, a 3×3
/// grouped conv, ReLU, a 1×1 conv and a sigmoid, giving `c` weight maps.
#[derive(Debug, Clone)]
pub struct PixelAttention {
    pub grouped: Conv,
    pub point: Conv,
    pub groups: usize,
}

impl PixelAttention {
    /// `sources` lists `(channels, guide)` in concatenation order.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        c: usize,
        groups: usize,
        sources: &[(usize, Guide)],
    ) -> Result<Self> {
        let mut per_group = 0;
        for &(ch, guide) in sources {
            per_group += match guide {
                Guide::Split => {
                    if ch % groups != 0 {
                        return Err(Error::ChannelNotDivisible { channels: ch, factor: groups });
                    }
                    ch / groups
                }
                Guide::Shared => ch,
            };
        }
        b.scope(name, |b| {
            Ok(PixelAttention {
                grouped: Conv::same(b, "grouped", per_group * groups, c, 3, groups)?,
                point: Conv::same(b, "point", c, c, 1, 1)?,
                groups,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, sources: &[(Var, Guide)]) -> Result<Var> {
        let mut parts = Vec::new();
        for j in 0..self.groups {
            for &(v, guide) in sources {
                match guide {
                    Guide::Shared => parts.push(v),
                    Guide::Split => {
                        let c = g.tape.shape(v).c;
                        if !c.is_multiple_of(self.groups) {
                            return Err(Error::ChannelNotDivisible { channels: c, factor: self.groups });
                        }
                        let len = c / self.groups;
                        parts.push(if self.groups == 1 { v } else { g.tape.slice(v, j * len, len)? });
                    }
                }
            }
        }
        let cat = g.tape.concat(&parts)?;
        let h = self.grouped.forward(g, cat)?;
        let h = g.tape.relu(h)?;
        let h = self.point.forward(g, h)?;
        g.tape.sigmoid(h)
    }
}

/// Frequency-spatial adaptive selector:
/// `F_fs = F ⊗ (F_s − mean(F_s)) + F`, `out = a·(W_p ⊗ F_fs) + b·F`.
#[derive(Debug, Clone)]
pub struct Fsas {
    /// Kernel `(1, 2, 7, 7)` with no bias.
    pub spatial: ParamId,
    pub pixel: PixelAttention,
    pub a: ParamId,
    pub b: ParamId,
}

impl Fsas {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize, groups: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Fsas {
                spatial: b
                    .scope("spatial", |b| b.kernel("weight", Shape::new(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)))?,
                pixel: PixelAttention::build(b, "pixel", c, groups, &[(c, Guide::Split), (2, Guide::Shared)])?,
                a: b.vector("a", &[0.0])?,
                b: b.vector("b", &[1.0])?,
            })
        })
    }
}

impl Block for Fsas {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x);
        let stats = g.tape.channel_stats(x)?;
        let fs = g.tape.conv2d(stats, g.p(self.spatial), None, ConvGeom::same(SPATIAL_KERNEL, 1))?;
        let mean = g.tape.mean(fs, ReduceAxes::Spatial)?;
        let mean = g.tape.expand_spatial(mean, s.h, s.w)?;
        let centered = g.tape.sub(fs, mean)?;
        let modulated = g.tape.mul(x, centered)?;
        let ffs = g.tape.add(modulated, x)?;
        let ffs_stats = g.tape.channel_stats(ffs)?;
        let wp = self.pixel.forward(g, &[(ffs, Guide::Split), (ffs_stats, Guide::Shared)])?;
        let weighted = g.tape.mul(wp, ffs)?;
        let (a, b) = (g.p(self.a), g.p(self.b));
        let left = g.tape.scale(weighted, a)?;
        let right = g.tape.scale(x, b)?;
        g.tape.add(left, right)
    }
}

/// Flexible attention module fusing a pre-stage feature `F_L` with a
/// post-stage feature `F_H`:
/// `out = F_sum + proj(F_L + W_p ⊗ (F_H − F_L))`, `F_sum = F_L + F_H`.
#[derive(Debug, Clone)]
pub struct Fam {
    pub spatial: Conv,
    pub squeeze: Conv,
    pub excite: Conv,
    pub pixel: PixelAttention,
    pub proj: Conv,
}

impl Fam {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize, groups: usize) -> Result<Self> {
        let hidden = (c / CHANNEL_REDUCTION).max(1);
        b.scope(name, |b| {
            Ok(Fam {
                spatial: Conv::same(b, "spatial", 2, 1, SPATIAL_KERNEL, 1)?,
                squeeze: Conv::same(b, "squeeze", c, hidden, 1, 1)?,
                excite: Conv::same(b, "excite", hidden, c, 1, 1)?,
                pixel: PixelAttention::build(
                    b,
                    "pixel",
                    c,
                    groups,
                    &[(c, Guide::Split), (1, Guide::Shared), (c, Guide::Split)],
                )?,
                proj: Conv::same(b, "proj", c, c, 1, 1)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_low: Var, f_high: Var) -> Result<Var> {
        let (sl, sh) = (g.tape.shape(f_low), g.tape.shape(f_high));
        if sl != sh {
            return Err(Error::ShapeMismatch(format!("FAM inputs {sl} and {sh}")));
        }
        let fsum = g.tape.add(f_low, f_high)?;
        let stats = g.tape.channel_stats(fsum)?;
        let ws = self.spatial.forward(g, stats)?;
        let ws = g.tape.sigmoid(ws)?;
        let pooled = g.tape.mean(fsum, ReduceAxes::Spatial)?;
        let wc = self.squeeze.forward(g, pooled)?;
        let wc = g.tape.relu(wc)?;
        let wc = self.excite.forward(g, wc)?;
        let wc = g.tape.sigmoid(wc)?;
        let wc = g.tape.expand_spatial(wc, sl.h, sl.w)?;
        let wp = self.pixel.forward(g, &[(fsum, Guide::Split), (ws, Guide::Shared), (wc, Guide::Split)])?;
        let diff = g.tape.sub(f_high, f_low)?;
        let gated = g.tape.mul(wp, diff)?;
        let blended = g.tape.add(f_low, gated)?;
        let projected = self.proj.forward(g, blended)?;
        g.tape.add(fsum, projected)
    }

    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, f_low: &Tensor<T>, f_high: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut g = store.bind(&mut tape)?;
        let lo = g.tape.constant(f_low.clone());
        let hi = g.tape.constant(f_high.clone());
        let y = self.forward(&mut g, lo, hi)?;
        Ok(g.tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{finite_diff_check_subset, probe_loss, GradCheck};
    use crate::dirconv::dac_forward;
    use crate::params::Init;
    use crate::tensor::{
        add, channel_stats, concat_channels, conv2d, expand_spatial, mul, reduce_mean, relu, resize_bilinear,
        scalar_mul, sigmoid, slice_channels, sub,
    };
    use crate::wavelet::{dwt2_stacked, iwt2_stacked};

    fn rand_t(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn build<B>(f: impl FnOnce(&mut Builder<'_, f64>) -> Result<B>) -> (B, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut init = Init::new(11);
        let block = f(&mut Builder::new(&mut store, &mut init)).unwrap();
        (block, store)
    }

    /// Replaces every parameter with small random values.
    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let s = store.by_name(&n).unwrap().shape();
            let t = Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-0.5..0.5));
            store.set(&n, t).unwrap();
        }
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let s = store.by_name(&n).unwrap().shape();
            store.set(&n, Tensor::zeros(s)).unwrap();
        }
    }

    fn identity_kernel(cout: usize, cin_per_group: usize, k: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(cout, cin_per_group, k, k), |o, i, y, x| {
            if i == o % cin_per_group && y == k / 2 && x == k / 2 {
                1.0
            } else {
                0.0
            }
        })
    }

    fn p<'s>(store: &'s ParamStore<f64>, name: &str) -> &'s Tensor<f64> {
        store.by_name(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn conv_ref(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
        conv2d(x, p(store, &format!("{prefix}.weight")), Some(p(store, &format!("{prefix}.bias"))), geom).unwrap()
    }

    fn res_ref(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
        let g = ConvGeom::same(3, 1);
        let h = relu(&conv_ref(store, &format!("{prefix}.conv1"), x, g));
        add(x, &conv_ref(store, &format!("{prefix}.conv2"), &h, g)).unwrap()
    }

    fn dru_ref(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
        let s = x.shape();
        let half = s.c / 2;
        let hi = res_ref(store, &format!("{prefix}.high"), &slice_channels(x, 0, half).unwrap());
        let lo = resize_bilinear(&slice_channels(x, half, half).unwrap(), s.h.div_ceil(2), s.w.div_ceil(2)).unwrap();
        let lo = resize_bilinear(&res_ref(store, &format!("{prefix}.low"), &lo), s.h, s.w).unwrap();
        let cat = concat_channels(&[&hi, &lo]).unwrap();
        add(&conv_ref(store, &format!("{prefix}.fuse"), &cat, ConvGeom::same(1, 1)), x).unwrap()
    }

    fn fse_branches_ref(store: &ParamStore<f64>, prefix: &str, f: &Tensor<f64>) -> Tensor<f64> {
        let c = f.shape().c;
        let spatial = conv_ref(store, &format!("{prefix}.depthwise"), f, ConvGeom::same(3, c));
        let bands = dwt2_stacked(f).unwrap();
        let bands = conv_ref(store, &format!("{prefix}.subband"), &bands, ConvGeom::same(3, 4));
        add(&spatial, &iwt2_stacked(&bands).unwrap()).unwrap()
    }

    fn pixel_ref(
        store: &ParamStore<f64>,
        prefix: &str,
        groups: usize,
        sources: &[(&Tensor<f64>, Guide)],
    ) -> Tensor<f64> {
        let mut parts = Vec::new();
        for j in 0..groups {
            for &(t, guide) in sources {
                parts.push(match guide {
                    Guide::Shared => t.clone(),
                    Guide::Split => {
                        let len = t.shape().c / groups;
                        slice_channels(t, j * len, len).unwrap()
                    }
                });
            }
        }
        let cat = concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        let h = relu(&conv_ref(store, &format!("{prefix}.grouped"), &cat, ConvGeom::same(3, groups)));
        sigmoid(&conv_ref(store, &format!("{prefix}.point"), &h, ConvGeom::same(1, 1)))
    }

    /// Max relative finite-difference error over the input and every parameter.
    fn gradcheck<F>(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, forward: F) -> f64
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    {
        let names: Vec<String> = store.names().map(String::from).collect();
        let k = inputs.len();
        let mut all = inputs;
        all.extend(store.iter().map(|p| p.value.clone()));
        let verify: Vec<usize> = (0..all.len()).collect();
        let cfg = GradCheck { step: 1e-6, max_coords: 12, seed: 3 };
        finite_diff_check_subset(
            |tape, vars| {
                let overrides: Vec<(&str, Var)> =
                    names.iter().map(String::as_str).zip(vars[k..].iter().copied()).collect();
                let mut g = store.bind_with(tape, &overrides)?;
                let y = forward(&mut g, &vars[..k])?;
                probe_loss(g.tape, y, 17)
            },
            &all,
            &verify,
            &cfg,
        )
        .unwrap()
    }

    #[test]
    fn conv_param_count() {
        let (_, store) = build(|b| Conv::same(b, "c", 3, 32, 3, 1));
        assert_eq!(store.count(), 896);
    }

    #[test]
    fn resblock_zero_is_identity_and_matches_oracle() {
        let (r, mut store) = build(|b| ResBlock::build(b, "r", 8));
        let x = rand_t(Shape::new(1, 8, 16, 16), 1);
        zero_all(&mut store);
        assert!(r.eval(&store, &x).unwrap().bit_eq(&x));
        randomize(&mut store, 2);
        let y = r.eval(&store, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&res_ref(&store, "r", &x)) < 1e-12);
    }

    #[test]
    fn fse_zero_weights_give_zero() {
        let (f, mut store) = build(|b| Fse::build(b, "f", 8, FseOptions::default()));
        zero_all(&mut store);
        let y = f.eval(&store, &rand_t(Shape::new(1, 8, 8, 8), 3)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn fse_identity_parts_double_input() {
        let (f, mut store) = build(|b| Fse::build(b, "f", 4, FseOptions::default()));
        zero_all(&mut store);
        store.set("f.depthwise.weight", identity_kernel(4, 1, 3)).unwrap();
        store.set("f.subband.weight", identity_kernel(16, 4, 3)).unwrap();
        let x = rand_t(Shape::new(2, 4, 8, 6), 4);
        let y = f.eval(&store, &x).unwrap();
        assert!(y.max_abs_diff(&scalar_mul(&x, 2.0)) < 1e-12);
    }

    #[test]
    fn fse_matches_oracle() {
        let (f, mut store) = build(|b| Fse::build(b, "f", 8, FseOptions::default()));
        randomize(&mut store, 5);
        let x = rand_t(Shape::new(1, 8, 8, 10), 6);
        let sum = fse_branches_ref(&store, "f", &x);
        let want = res_ref(&store, "f.res2", &res_ref(&store, "f.res1", &sum));
        assert!(f.eval(&store, &x).unwrap().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn fse_odd_dims_pad_then_crop() {
        let (f, mut store) = build(|b| Fse::build(b, "f", 8, FseOptions { pre: Some(true), dru: true }));
        randomize(&mut store, 7);
        let x = rand_t(Shape::new(1, 8, 7, 9), 8);
        let y = f.eval(&store, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let padded = crate::tensor::pad_reflect(&x, Pad::new(0, 1, 0, 1)).unwrap();
        let full = f.eval(&store, &padded).unwrap();
        let want = crate::tensor::crop(&full, 0, 0, 7, 9).unwrap();
        assert!(y.bit_eq(&want));
    }

    #[test]
    fn fse_even_dims_record_no_padding() {
        let (f, store) = build(|b| Fse::build(b, "f", 8, FseOptions::default()));
        let run = |h: usize| {
            let mut tape = Tape::new();
            let mut g = store.bind(&mut tape).unwrap();
            let x = g.tape.constant(rand_t(Shape::new(1, 8, h, 8), 9));
            f.forward(&mut g, x).unwrap();
            tape.len()
        };
        assert_eq!(run(7), run(8) + 2);
    }

    #[test]
    fn dru_zero_is_identity_and_matches_oracle() {
        let (d, mut store) = build(|b| Dru::build(b, "d", 8));
        let x = rand_t(Shape::new(1, 8, 15, 13), 10);
        zero_all(&mut store);
        assert!(d.eval(&store, &x).unwrap().bit_eq(&x));
        randomize(&mut store, 11);
        let y = d.eval(&store, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&dru_ref(&store, "d", &x)) < 1e-5);
    }

    #[test]
    fn dru_rejects_odd_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        assert!(matches!(Dru::build(&mut Builder::new(&mut store, &mut init), "d", 7), Err(Error::OddChannels(7))));
        let (d, store) = build(|b| Dru::build(b, "d", 8));
        assert!(d.eval(&store, &rand_t(Shape::new(1, 7, 4, 4), 0)).is_err());
    }

    #[test]
    fn dfse_zero_weights_give_zero() {
        let (f, mut store) = build(|b| Fse::build(b, "f", 8, FseOptions { pre: Some(true), dru: true }));
        zero_all(&mut store);
        let y = f.eval(&store, &rand_t(Shape::new(1, 8, 8, 8), 12)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn dfse_reduces_to_dru_of_doubled_conv() {
        let (f, mut store) = build(|b| Fse::build(b, "f", 8, FseOptions { pre: Some(true), dru: true }));
        randomize(&mut store, 13);
        store.set("f.pre.alpha", Tensor::vector(&[1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        store.set("f.depthwise.weight", identity_kernel(8, 1, 3)).unwrap();
        store.set("f.depthwise.bias", Tensor::zeros(Shape::new(1, 8, 1, 1))).unwrap();
        store.set("f.subband.weight", identity_kernel(32, 8, 3)).unwrap();
        store.set("f.subband.bias", Tensor::zeros(Shape::new(1, 32, 1, 1))).unwrap();
        let x = rand_t(Shape::new(1, 8, 8, 8), 14);
        let conv = conv_ref(&store, "f.pre.conv", &x, ConvGeom::same(3, 1));
        let want = dru_ref(&store, "f.dru", &scalar_mul(&conv, 2.0));
        assert!(f.eval(&store, &x).unwrap().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn dac_layer_matches_eager_fusion() {
        let (d, mut store) = build(|b| Dac::build(b, "d", 4, 6));
        randomize(&mut store, 15);
        let x = rand_t(Shape::new(1, 4, 9, 7), 16);
        let want = dac_forward(&x, &d.params(&store)).unwrap();
        assert!(d.eval(&store, &x).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fsas_init_is_bitwise_identity() {
        let (f, store) = build(|b| Fsas::build(b, "s", 8, 4));
        for seed in 0..5 {
            let x = rand_t(Shape::new(2, 8, 6, 10), seed);
            assert!(f.eval(&store, &x).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn fsas_constant_input_leaves_features_unmodulated() {
        let (f, mut store) = build(|b| Fsas::build(b, "s", 8, 4));
        randomize(&mut store, 17);
        zero_all_prefix(&mut store, "s.pixel");
        // a centre-only kernel keeps the map constant up to the borders
        let centre =
            Tensor::from_fn(Shape::new(1, 2, 7, 7), |_, i, y, x| if y == 3 && x == 3 { 0.7 - i as f64 } else { 0.0 });
        store.set("s.spatial.weight", centre).unwrap();
        store.set("s.a", Tensor::vector(&[1.0])).unwrap();
        store.set("s.b", Tensor::vector(&[0.0])).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 8, 6, 6), |_, c, _, _| c as f64 * 0.1 - 0.3);
        let y = f.eval(&store, &x).unwrap();
        assert!(y.max_abs_diff(&scalar_mul(&x, 0.5)) < 1e-12);
    }

    fn zero_all_prefix(store: &mut ParamStore<f64>, prefix: &str) {
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
        for n in names {
            let s = store.by_name(&n).unwrap().shape();
            store.set(&n, Tensor::zeros(s)).unwrap();
        }
    }

    #[test]
    fn fsas_matches_oracle() {
        let (f, mut store) = build(|b| Fsas::build(b, "s", 8, 4));
        randomize(&mut store, 18);
        let x = rand_t(Shape::new(2, 8, 6, 6), 19);
        let s = x.shape();
        let fs = conv2d(&channel_stats(&x), p(&store, "s.spatial.weight"), None, ConvGeom::same(7, 1)).unwrap();
        let mean = expand_spatial(&reduce_mean(&fs, ReduceAxes::Spatial), s.h, s.w).unwrap();
        let ffs = add(&mul(&x, &sub(&fs, &mean).unwrap()).unwrap(), &x).unwrap();
        let stats = channel_stats(&ffs);
        let wp = pixel_ref(&store, "s.pixel", 4, &[(&ffs, Guide::Split), (&stats, Guide::Shared)]);
        let a = p(&store, "s.a").data()[0];
        let b = p(&store, "s.b").data()[0];
        let want = add(&scalar_mul(&mul(&wp, &ffs).unwrap(), a), &scalar_mul(&x, b)).unwrap();
        assert!(f.eval(&store, &x).unwrap().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn fam_zero_projection_is_sum() {
        let (f, mut store) = build(|b| Fam::build(b, "m", 8, 4));
        randomize(&mut store, 20);
        zero_all_prefix(&mut store, "m.proj");
        let lo = rand_t(Shape::new(1, 8, 6, 6), 21);
        let hi = rand_t(Shape::new(1, 8, 6, 6), 22);
        let y = f.eval(&store, &lo, &hi).unwrap();
        assert!(y.bit_eq(&add(&lo, &hi).unwrap()));
    }

    #[test]
    fn fam_equal_inputs_ignore_pixel_weights() {
        let (f, mut store) = build(|b| Fam::build(b, "m", 8, 4));
        randomize(&mut store, 23);
        let x = rand_t(Shape::new(1, 8, 6, 6), 24);
        let want = add(&scalar_mul(&x, 2.0), &conv_ref(&store, "m.proj", &x, ConvGeom::same(1, 1))).unwrap();
        let y1 = f.eval(&store, &x, &x).unwrap();
        randomize_prefix(&mut store, "m.pixel", 25);
        let y2 = f.eval(&store, &x, &x).unwrap();
        assert!(y1.max_abs_diff(&want) < 1e-12);
        assert!(y2.max_abs_diff(&want) < 1e-12);
    }

    fn randomize_prefix(store: &mut ParamStore<f64>, prefix: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
        for n in names {
            let s = store.by_name(&n).unwrap().shape();
            store.set(&n, Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-2.0..2.0))).unwrap();
        }
    }

    #[test]
    fn fam_matches_oracle() {
        let (f, mut store) = build(|b| Fam::build(b, "m", 8, 4));
        randomize(&mut store, 26);
        let lo = rand_t(Shape::new(2, 8, 6, 4), 27);
        let hi = rand_t(Shape::new(2, 8, 6, 4), 28);
        let g1 = ConvGeom::same(1, 1);
        let fsum = add(&lo, &hi).unwrap();
        let ws = sigmoid(&conv_ref(&store, "m.spatial", &channel_stats(&fsum), ConvGeom::same(7, 1)));
        let pooled = reduce_mean(&fsum, ReduceAxes::Spatial);
        let wc = relu(&conv_ref(&store, "m.squeeze", &pooled, g1));
        let wc = expand_spatial(&sigmoid(&conv_ref(&store, "m.excite", &wc, g1)), 6, 4).unwrap();
        let wp = pixel_ref(&store, "m.pixel", 4, &[(&fsum, Guide::Split), (&ws, Guide::Shared), (&wc, Guide::Split)]);
        let one_minus = wp.map(|v| 1.0 - v);
        let blend = add(&mul(&wp, &hi).unwrap(), &mul(&one_minus, &lo).unwrap()).unwrap();
        let want = add(&fsum, &conv_ref(&store, "m.proj", &blend, g1)).unwrap();
        assert!(f.eval(&store, &lo, &hi).unwrap().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn fam_rejects_mismatched_inputs() {
        let (f, store) = build(|b| Fam::build(b, "m", 8, 4));
        let lo = rand_t(Shape::new(1, 8, 6, 6), 0);
        let hi = rand_t(Shape::new(1, 8, 6, 4), 0);
        assert!(matches!(f.eval(&store, &lo, &hi), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn blocks_preserve_shape() {
        let x = rand_t(Shape::new(1, 8, 10, 6), 29);
        let (r, s) = build(|b| ResBlock::build(b, "r", 8));
        assert_eq!(r.eval(&s, &x).unwrap().shape(), x.shape());
        let (f, s) = build(|b| Fse::build(b, "f", 8, FseOptions { pre: Some(false), dru: false }));
        assert_eq!(f.eval(&s, &x).unwrap().shape(), x.shape());
        let (f, s) = build(|b| Fsas::build(b, "s", 8, 4));
        assert_eq!(f.eval(&s, &x).unwrap().shape(), x.shape());
    }

    #[test]
    fn gradcheck_resblock_and_dru() {
        let x = rand_t(Shape::new(1, 8, 6, 6), 30);
        let (r, mut s) = build(|b| ResBlock::build(b, "r", 8));
        randomize(&mut s, 31);
        let err = gradcheck(&s, vec![x.clone()], |g, v| r.forward(g, v[0]));
        assert!(err < 1e-3, "resblock {err}");
        let (d, mut s) = build(|b| Dru::build(b, "d", 8));
        randomize(&mut s, 32);
        let err = gradcheck(&s, vec![x], |g, v| d.forward(g, v[0]));
        assert!(err < 1e-3, "dru {err}");
    }

    #[test]
    fn gradcheck_fse_and_dfse() {
        let x = rand_t(Shape::new(1, 8, 8, 8), 33);
        let (f, mut s) = build(|b| Fse::build(b, "f", 8, FseOptions::default()));
        randomize(&mut s, 34);
        let err = gradcheck(&s, vec![x.clone()], |g, v| f.forward(g, v[0]));
        assert!(err < 1e-3, "fse {err}");
        let (f, mut s) = build(|b| Fse::build(b, "f", 8, FseOptions { pre: Some(true), dru: true }));
        randomize(&mut s, 35);
        let err = gradcheck(&s, vec![x], |g, v| f.forward(g, v[0]));
        assert!(err < 1e-3, "dfse {err}");
    }

    #[test]
    fn gradcheck_fsas_and_fam() {
        let x = rand_t(Shape::new(1, 8, 8, 8), 36);
        let y = rand_t(Shape::new(1, 8, 8, 8), 37);
        let (f, mut s) = build(|b| Fsas::build(b, "s", 8, 4));
        randomize(&mut s, 38);
        let err = gradcheck(&s, vec![x.clone()], |g, v| f.forward(g, v[0]));
        assert!(err < 1e-3, "fsas {err}");
        let (m, mut s) = build(|b| Fam::build(b, "m", 8, 4));
        randomize(&mut s, 39);
        let err = gradcheck(&s, vec![x, y], |g, v| m.forward(g, v[0], v[1]));
        assert!(err < 1e-3, "fam {err}");
    }
}

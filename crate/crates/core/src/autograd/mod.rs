//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation as a node holding its output value
//! and input ids. Ids are allocated in execution order, so walking the
//! nodes backwards from the loss visits each one exactly once after all of
//! its consumers. Gradients reaching a node from several consumers are
//! summed.

mod gradcheck;

pub use gradcheck::{finite_diff_check, finite_diff_check_subset, mixed_precision_check, probe_loss, GradCheck};

use std::collections::HashMap;

use crate::dirconv::{transform, transform_adjoint, Branch};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, BinaryOp, ConvGeom, Pad, PoolKind, ReduceAxes, Scalar, Shape, Tensor};
use crate::wavelet::{dwt2_stacked, iwt2_stacked};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive and its static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimOp<T: Scalar> {
    /// `[x, kernel]` or `[x, kernel, bias]`.
    Conv2d(ConvGeom),
    /// `[x, kernel]` or `[x, kernel, bias]`; kernel laid out `(c_in, c_out/g, kh, kw)`.
    ConvTranspose2d(ConvGeom),
    /// `[a, b]`, `b` may be a single-channel map.
    Binary(BinaryOp),
    /// `[x, s]` with `s` a `(1, 1, 1, 1)` scalar.
    Scale,
    Relu,
    Sigmoid,
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    Pool {
        kind: PoolKind,
        k: usize,
        stride: usize,
    },
    ChannelStats,
    Resize {
        h: usize,
        w: usize,
    },
    /// Any number of inputs joined on the channel axis.
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
    PadReflect(Pad),
    Crop {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    Mean(ReduceAxes),
    ExpandSpatial {
        h: usize,
        w: usize,
    },
    SumAll,
    Dwt2,
    Iwt2,
    KernelTransform(Branch),
    /// `[t₁, …, t_k, alpha]` with `alpha` shaped `(1, k, 1, 1)`: `Σ alphaᵢ tᵢ`.
    WeightedSum,
    /// `[pred, target]`: mean of `√(d² + ε²)`.
    Charbonnier {
        eps: T,
    },
}

impl<T: Scalar> PrimOp<T> {
    pub fn name(&self) -> &'static str {
        match self {
            PrimOp::Conv2d(_) => "conv2d",
            PrimOp::ConvTranspose2d(_) => "conv_transpose2d",
            PrimOp::Binary(BinaryOp::Add) => "add",
            PrimOp::Binary(BinaryOp::Sub) => "sub",
            PrimOp::Binary(BinaryOp::Mul) => "mul",
            PrimOp::Scale => "scale",
            PrimOp::Relu => "relu",
            PrimOp::Sigmoid => "sigmoid",
            PrimOp::PixelShuffle(_) => "pixel_shuffle",
            PrimOp::PixelUnshuffle(_) => "pixel_unshuffle",
            PrimOp::Pool { .. } => "pool2d",
            PrimOp::ChannelStats => "channel_stats",
            PrimOp::Resize { .. } => "resize_bilinear",
            PrimOp::Concat => "concat_channels",
            PrimOp::Slice { .. } => "slice_channels",
            PrimOp::PadReflect(_) => "pad_reflect",
            PrimOp::Crop { .. } => "crop",
            PrimOp::Mean(_) => "reduce_mean",
            PrimOp::ExpandSpatial { .. } => "expand_spatial",
            PrimOp::SumAll => "sum",
            PrimOp::Dwt2 => "dwt2",
            PrimOp::Iwt2 => "iwt2",
            PrimOp::KernelTransform(_) => "kernel_transform",
            PrimOp::WeightedSum => "weighted_sum",
            PrimOp::Charbonnier { .. } => "charbonnier",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            PrimOp::Conv2d(_) | PrimOp::ConvTranspose2d(_) => n == 2 || n == 3,
            PrimOp::Binary(_) | PrimOp::Scale | PrimOp::Charbonnier { .. } => n == 2,
            PrimOp::Concat => n >= 1,
            PrimOp::WeightedSum => n >= 2,
            _ => n == 1,
        }
    }

    fn forward(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(match self {
            PrimOp::Conv2d(geom) => tensor::conv2d(xs[0], xs[1], xs.get(2).copied(), *geom)?,
            PrimOp::ConvTranspose2d(geom) => tensor::conv_transpose2d(xs[0], xs[1], xs.get(2).copied(), *geom)?,
            PrimOp::Binary(op) => tensor::ewise(xs[0], xs[1], *op)?,
            PrimOp::Scale => {
                if xs[1].numel() != 1 {
                    return Err(shape_err(format!("scale factor must be a scalar, got {}", xs[1].shape())));
                }
                tensor::scalar_mul(xs[0], xs[1].data()[0])
            }
            PrimOp::Relu => tensor::relu(xs[0]),
            PrimOp::Sigmoid => tensor::sigmoid(xs[0]),
            PrimOp::PixelShuffle(r) => tensor::pixel_shuffle(xs[0], *r)?,
            PrimOp::PixelUnshuffle(r) => tensor::pixel_unshuffle(xs[0], *r)?,
            PrimOp::Pool { kind, k, stride } => tensor::pool2d(xs[0], *kind, *k, *stride)?,
            PrimOp::ChannelStats => tensor::channel_stats(xs[0]),
            PrimOp::Resize { h, w } => tensor::resize_bilinear(xs[0], *h, *w)?,
            PrimOp::Concat => tensor::concat_channels(xs)?,
            PrimOp::Slice { start, len } => tensor::slice_channels(xs[0], *start, *len)?,
            PrimOp::PadReflect(pad) => tensor::pad_reflect(xs[0], *pad)?,
            PrimOp::Crop { top, left, h, w } => tensor::crop(xs[0], *top, *left, *h, *w)?,
            PrimOp::Mean(axes) => tensor::reduce_mean(xs[0], *axes),
            PrimOp::ExpandSpatial { h, w } => tensor::expand_spatial(xs[0], *h, *w)?,
            PrimOp::SumAll => Tensor::scalar(xs[0].sum()),
            PrimOp::Dwt2 => dwt2_stacked(xs[0])?,
            PrimOp::Iwt2 => iwt2_stacked(xs[0])?,
            PrimOp::KernelTransform(b) => transform(xs[0], *b)?,
            PrimOp::WeightedSum => {
                let (terms, alpha) = xs.split_at(xs.len() - 1);
                let alpha = alpha[0];
                if alpha.numel() != terms.len() {
                    return Err(shape_err(format!("{} coefficients for {} terms", alpha.numel(), terms.len())));
                }
                let s = terms[0].shape();
                let mut acc = vec![T::zero(); s.numel()];
                for (t, &a) in terms.iter().zip(alpha.data()) {
                    if t.shape() != s {
                        return Err(shape_err(format!("weighted sum of {s} and {}", t.shape())));
                    }
                    for (d, &v) in acc.iter_mut().zip(t.data()) {
                        *d = *d + a * v;
                    }
                }
                Tensor::from_raw(s, acc)
            }
            PrimOp::Charbonnier { eps } => {
                let (p, t) = (xs[0], xs[1]);
                if p.shape() != t.shape() {
                    return Err(shape_err(format!("loss of {} against {}", p.shape(), t.shape())));
                }
                let e2 = *eps * *eps;
                let sum = p.data().iter().zip(t.data()).fold(T::zero(), |acc, (&a, &b)| {
                    let d = a - b;
                    acc + (d * d + e2).sqrt()
                });
                Tensor::scalar(sum / T::from_usize_lossy(p.numel().max(1)))
            }
        })
    }

    /// Gradients for each input given the output gradient `g`. Entries are
    /// `None` for inputs flagged as not needing a gradient.
    fn backward(
        &self,
        xs: &[&Tensor<T>],
        out: &Tensor<T>,
        g: &Tensor<T>,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; xs.len()];
        match self {
            PrimOp::Conv2d(geom) => {
                if need[0] {
                    grads[0] = Some(tensor::conv2d_backward_input(g, xs[1], xs[0].shape(), *geom)?);
                }
                if need[1] {
                    grads[1] = Some(tensor::conv2d_backward_weight(xs[0], g, xs[1].shape(), *geom)?);
                }
                if xs.len() == 3 && need[2] {
                    grads[2] = Some(tensor::conv2d_bias_grad(g).reshape(xs[2].shape())?);
                }
            }
            PrimOp::ConvTranspose2d(geom) => {
                if need[0] {
                    grads[0] = Some(tensor::conv2d(g, xs[1], None, *geom)?);
                }
                if need[1] {
                    grads[1] = Some(tensor::conv2d_backward_weight(g, xs[0], xs[1].shape(), *geom)?);
                }
                if xs.len() == 3 && need[2] {
                    grads[2] = Some(tensor::conv2d_bias_grad(g).reshape(xs[2].shape())?);
                }
            }
            PrimOp::Binary(op) => {
                let (a, b) = (xs[0], xs[1]);
                match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if need[0] {
                            grads[0] = Some(g.clone());
                        }
                        if need[1] {
                            let r = tensor::reduce_to_shape(g, b.shape());
                            grads[1] = Some(if *op == BinaryOp::Sub { r.map(|v| -v) } else { r });
                        }
                    }
                    BinaryOp::Mul => {
                        if need[0] {
                            grads[0] = Some(tensor::mul(g, b)?);
                        }
                        if need[1] {
                            grads[1] = Some(tensor::reduce_to_shape(&tensor::mul(g, a)?, b.shape()));
                        }
                    }
                }
            }
            PrimOp::Scale => {
                if need[0] {
                    grads[0] = Some(tensor::scalar_mul(g, xs[1].data()[0]));
                }
                if need[1] {
                    grads[1] = Some(Tensor::from_raw(xs[1].shape(), vec![g.dot(xs[0])?]));
                }
            }
            PrimOp::Relu => {
                if need[0] {
                    // subgradient 0 at exactly 0
                    let data =
                        xs[0].data().iter().zip(g.data()).map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() });
                    grads[0] = Some(Tensor::from_raw(g.shape(), data.collect()));
                }
            }
            PrimOp::Sigmoid => {
                if need[0] {
                    let data = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y));
                    grads[0] = Some(Tensor::from_raw(g.shape(), data.collect()));
                }
            }
            PrimOp::PixelShuffle(r) => grads[0] = Some(tensor::pixel_unshuffle(g, *r)?),
            PrimOp::PixelUnshuffle(r) => grads[0] = Some(tensor::pixel_shuffle(g, *r)?),
            PrimOp::Pool { kind, k, stride } => grads[0] = Some(tensor::pool2d_backward(xs[0], g, *kind, *k, *stride)?),
            PrimOp::ChannelStats => grads[0] = Some(tensor::channel_stats_backward(xs[0], g)),
            PrimOp::Resize { .. } => grads[0] = Some(tensor::resize_bilinear_backward(g, xs[0].shape())),
            PrimOp::Concat => {
                let mut start = 0;
                for (i, x) in xs.iter().enumerate() {
                    let c = x.shape().c;
                    if need[i] {
                        grads[i] = Some(tensor::slice_channels(g, start, c)?);
                    }
                    start += c;
                }
            }
            PrimOp::Slice { start, .. } => grads[0] = Some(tensor::embed_channels(g, *start, xs[0].shape())),
            PrimOp::PadReflect(pad) => grads[0] = Some(tensor::pad_reflect_backward(g, xs[0].shape(), *pad)),
            PrimOp::Crop { top, left, .. } => grads[0] = Some(tensor::crop_backward(g, xs[0].shape(), *top, *left)),
            PrimOp::Mean(axes) => {
                let s = xs[0].shape();
                grads[0] = Some(match axes {
                    ReduceAxes::All => Tensor::full(s, g.data()[0] / T::from_usize_lossy(s.numel())),
                    ReduceAxes::Spatial => {
                        let inv = T::one() / T::from_usize_lossy(s.plane());
                        tensor::expand_spatial(&g.map(|v| v * inv), s.h, s.w)?
                    }
                });
            }
            PrimOp::ExpandSpatial { .. } => {
                let plane = T::from_usize_lossy(g.shape().plane());
                grads[0] = Some(tensor::reduce_mean(g, ReduceAxes::Spatial).map(|v| v * plane));
            }
            PrimOp::SumAll => grads[0] = Some(Tensor::full(xs[0].shape(), g.data()[0])),
            PrimOp::Dwt2 => grads[0] = Some(iwt2_stacked(g)?),
            PrimOp::Iwt2 => grads[0] = Some(dwt2_stacked(g)?),
            PrimOp::KernelTransform(b) => grads[0] = Some(transform_adjoint(g, *b)?),
            PrimOp::WeightedSum => {
                let k = xs.len() - 1;
                let alpha = xs[k];
                for i in 0..k {
                    if need[i] {
                        grads[i] = Some(tensor::scalar_mul(g, alpha.data()[i]));
                    }
                }
                if need[k] {
                    let ga = xs[..k].iter().map(|t| g.dot(t)).collect::<Result<Vec<_>>>()?;
                    grads[k] = Some(Tensor::from_raw(alpha.shape(), ga));
                }
            }
            PrimOp::Charbonnier { eps } => {
                let e2 = *eps * *eps;
                let scale = g.data()[0] / T::from_usize_lossy(xs[0].numel());
                let gp: Vec<T> = xs[0]
                    .data()
                    .iter()
                    .zip(xs[1].data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        scale * d / (d * d + e2).sqrt()
                    })
                    .collect();
                if need[1] {
                    grads[1] = Some(Tensor::from_raw(xs[1].shape(), gp.iter().map(|&v| -v).collect()));
                }
                if need[0] {
                    grads[0] = Some(Tensor::from_raw(xs[0].shape(), gp));
                }
            }
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone)]
enum NodeKind<T: Scalar> {
    Constant,
    Param,
    Op(PrimOp<T>),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    kind: NodeKind<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: NodeKind<T>, inputs: Vec<Var>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { kind, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (data, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(NodeKind::Constant, Vec::new(), value, false)
    }

    /// A named trainable leaf. Names must be unique on one tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::BadConfig(format!("parameter {name} registered twice")));
        }
        let v = self.push(NodeKind::Param, Vec::new(), value, true);
        self.params.push((name, v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Evaluates `op` on the given inputs and appends the node.
    pub fn record(&mut self, op: PrimOp<T>, inputs: &[Var]) -> Result<Var> {
        if !op.arity_ok(inputs.len()) {
            return Err(Error::UnsupportedOp(format!("{} does not take {} inputs", op.name(), inputs.len())));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::UnsupportedOp(format!("input {bad:?} is not on this tape")));
        }
        let value = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&xs)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(NodeKind::Op(op), inputs.to_vec(), value, requires_grad))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let mut ins = vec![x, kernel];
        ins.extend(bias);
        self.record(PrimOp::Conv2d(geom), &ins)
    }

    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let mut ins = vec![x, kernel];
        ins.extend(bias);
        self.record(PrimOp::ConvTranspose2d(geom), &ins)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(PrimOp::Binary(BinaryOp::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(PrimOp::Binary(BinaryOp::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(PrimOp::Binary(BinaryOp::Mul), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.record(PrimOp::Scale, &[x, s])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(PrimOp::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(PrimOp::Sigmoid, &[x])
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        self.record(PrimOp::PixelShuffle(r), &[x])
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        self.record(PrimOp::PixelUnshuffle(r), &[x])
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        self.record(PrimOp::Pool { kind, k, stride }, &[x])
    }

    pub fn channel_stats(&mut self, x: Var) -> Result<Var> {
        self.record(PrimOp::ChannelStats, &[x])
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.record(PrimOp::Resize { h, w }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(PrimOp::Concat, parts)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(PrimOp::Slice { start, len }, &[x])
    }

    pub fn pad_reflect(&mut self, x: Var, pad: Pad) -> Result<Var> {
        self.record(PrimOp::PadReflect(pad), &[x])
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        self.record(PrimOp::Crop { top, left, h, w }, &[x])
    }

    pub fn mean(&mut self, x: Var, axes: ReduceAxes) -> Result<Var> {
        self.record(PrimOp::Mean(axes), &[x])
    }

    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.record(PrimOp::ExpandSpatial { h, w }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(PrimOp::SumAll, &[x])
    }

    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        self.record(PrimOp::Dwt2, &[x])
    }

    pub fn iwt2(&mut self, x: Var) -> Result<Var> {
        self.record(PrimOp::Iwt2, &[x])
    }

    pub fn kernel_transform(&mut self, w: Var, branch: Branch) -> Result<Var> {
        self.record(PrimOp::KernelTransform(branch), &[w])
    }

    pub fn weighted_sum(&mut self, terms: &[Var], alpha: Var) -> Result<Var> {
        let mut ins = terms.to_vec();
        ins.push(alpha);
        self.record(PrimOp::WeightedSum, &ins)
    }

    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        self.record(PrimOp::Charbonnier { eps }, &[pred, target])
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of every
    /// registered parameter (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NotScalarLoss(ls.to_string()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op(op) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&xs, &node.value, &g, &need)?;
            for (v, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let entries = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect();
        Ok(GradMap::from_entries(entries))
    }
}

/// Parameter name → gradient, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> GradMap<T> {
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        GradMap { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Resets every gradient to zero, keeping shapes.
    pub fn zero_grad(&mut self) {
        for (_, g) in &mut self.entries {
            *g = Tensor::zeros(g.shape());
        }
    }

    /// Adds `other` entry-wise; both maps must cover the same names.
    pub fn accumulate(&mut self, other: &GradMap<T>) -> Result<()> {
        for (name, g) in &mut self.entries {
            let o = other.get(name).ok_or_else(|| shape_err(format!("gradient {name} missing")))?;
            if o.shape() != g.shape() {
                return Err(shape_err(format!("gradient {name}: {} vs {}", g.shape(), o.shape())));
            }
            g.add_assign(o);
        }
        Ok(())
    }

    /// Global L2 norm over all entries.
    pub fn global_norm(&self) -> T {
        self.entries.iter().fold(T::zero(), |acc, (_, g)| acc + g.sum_squares()).sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for (_, g) in &mut self.entries {
            *g = g.map(|v| v * s);
        }
    }
}

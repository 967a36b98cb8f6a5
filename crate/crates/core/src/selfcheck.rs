//! Finite-difference verification of every differentiable primitive, every
//! block and the assembled network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_check_subset, mixed_precision_check, probe_loss, GradCheck, Tape, Var};
use crate::blocks::{Block, Dac, Dru, Fam, Fsas, Fse, FseOptions, ResBlock};
use crate::dirconv::Branch;
use crate::error::{Error, Result};
use crate::network::{MoireNet, NetworkConfig};
use crate::params::{Builder, Graph, Init, ParamStore};
use crate::tensor::{ConvGeom, Pad, PoolKind, ReduceAxes, Scalar, Shape, Tensor};

/// Precision of the analytic gradients under test. `F64` compares against
/// 64-bit central differences; `F32` runs the backward pass in 32-bit and
/// compares against 64-bit central differences at the same point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Maximum relative error accepted for primitives and blocks.
    pub fn op_threshold(self) -> f64 {
        match self {
            Precision::F64 => 1e-3,
            Precision::F32 => 1e-2,
        }
    }

    /// Maximum relative error accepted for the whole network.
    pub fn network_threshold(self) -> f64 {
        match self {
            Precision::F64 => 1e-2,
            Precision::F32 => 5e-2,
        }
    }
}

const OP_STEP: f64 = 1e-4;
const BLOCK_STEP: f64 = 1e-5;
const NETWORK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Primitive operations, in the order they are reported.
pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "conv2d_grouped",
    "conv2d_strided",
    "conv_transpose2d",
    "add",
    "sub",
    "mul",
    "mul_broadcast",
    "scale",
    "relu",
    "sigmoid",
    "pixel_shuffle",
    "pixel_unshuffle",
    "max_pool",
    "avg_pool",
    "channel_stats",
    "resize",
    "concat",
    "slice",
    "pad_reflect",
    "crop",
    "mean",
    "expand_spatial",
    "sum",
    "dwt2",
    "iwt2",
    "cdc",
    "adc",
    "hmdc",
    "vmdc",
    "weighted_sum",
    "charbonnier",
];

pub const BLOCKS: &[&str] = &["resblock", "dac", "fse", "dru", "dfse", "fsas", "fam"];

pub const NETWORK: &str = "network";

/// Every check name: primitives, blocks, then the network.
pub fn all_names() -> Vec<&'static str> {
    PRIMITIVES.iter().chain(BLOCKS).copied().chain([NETWORK]).collect()
}

/// Uniform draws rounded to `f32`, so both precisions see the same values.
fn rand_t<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(lo..hi) as f32 as f64))
}

/// Values bounded away from zero so the ReLU kink is never crossed.
fn off_kink<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v = rng.gen_range(0.1..1.0) as f32 as f64;
        T::lit(if rng.gen_bool(0.5) { v } else { -v })
    })
}

type LossFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

/// A scalar function of some inputs, plus which inputs to differentiate.
struct Case<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    verify: Vec<usize>,
    loss: LossFn<T>,
    check: GradCheck,
}

fn unknown(name: &str) -> Error {
    Error::UnsupportedOp(format!("no gradient check named {name}"))
}

fn primitive<T: Scalar>(name: &str) -> Result<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let s = Shape::new;
    let mut r = |shape: Shape| rand_t::<T>(shape, &mut rng, -1.0, 1.0);
    let x = r(s(1, 4, 6, 6));
    let (inputs, op): (Vec<Tensor<T>>, LossFn<T>) = match name {
        "conv2d" => (
            vec![x, r(s(3, 4, 3, 3)), r(s(1, 3, 1, 1))],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::same(3, 1))),
        ),
        "conv2d_grouped" => {
            (vec![x, r(s(4, 2, 3, 3))], Box::new(|t, v| t.conv2d(v[0], v[1], None, ConvGeom::same(3, 2))))
        }
        "conv2d_strided" => {
            (vec![x, r(s(2, 4, 3, 3))], Box::new(|t, v| t.conv2d(v[0], v[1], None, ConvGeom::new(2, 1, 1))))
        }
        "conv_transpose2d" => (
            vec![r(s(1, 4, 3, 3)), r(s(4, 2, 4, 4)), r(s(1, 2, 1, 1))],
            Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1, 1))),
        ),
        "add" => (vec![x, r(s(1, 4, 6, 6))], Box::new(|t, v| t.add(v[0], v[1]))),
        "sub" => (vec![x, r(s(1, 4, 6, 6))], Box::new(|t, v| t.sub(v[0], v[1]))),
        "mul" => (vec![x, r(s(1, 4, 6, 6))], Box::new(|t, v| t.mul(v[0], v[1]))),
        "mul_broadcast" => (vec![x, r(s(1, 1, 6, 6))], Box::new(|t, v| t.mul(v[0], v[1]))),
        "scale" => (vec![x, r(s(1, 1, 1, 1))], Box::new(|t, v| t.scale(v[0], v[1]))),
        "relu" => (vec![off_kink(s(1, 4, 6, 6), &mut rng)], Box::new(|t, v| t.relu(v[0]))),
        "sigmoid" => (vec![x], Box::new(|t, v| t.sigmoid(v[0]))),
        "pixel_shuffle" => (vec![r(s(1, 8, 3, 3))], Box::new(|t, v| t.pixel_shuffle(v[0], 2))),
        "pixel_unshuffle" => (vec![x], Box::new(|t, v| t.pixel_unshuffle(v[0], 2))),
        "max_pool" => (vec![x], Box::new(|t, v| t.pool2d(v[0], PoolKind::Max, 2, 2))),
        "avg_pool" => (vec![x], Box::new(|t, v| t.pool2d(v[0], PoolKind::Avg, 3, 1))),
        "channel_stats" => (vec![x], Box::new(|t, v| t.channel_stats(v[0]))),
        "resize" => (vec![r(s(1, 2, 5, 7))], Box::new(|t, v| t.resize(v[0], 3, 4))),
        "concat" => (vec![x, r(s(1, 2, 6, 6))], Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        "slice" => (vec![x], Box::new(|t, v| t.slice(v[0], 1, 2))),
        "pad_reflect" => (vec![x], Box::new(|t, v| t.pad_reflect(v[0], Pad::new(1, 2, 0, 3)))),
        "crop" => (vec![x], Box::new(|t, v| t.crop(v[0], 1, 2, 4, 3))),
        "mean" => (vec![x], Box::new(|t, v| t.mean(v[0], ReduceAxes::Spatial))),
        "expand_spatial" => (vec![r(s(1, 4, 1, 1))], Box::new(|t, v| t.expand_spatial(v[0], 3, 5))),
        "sum" => (vec![x], Box::new(|t, v| t.sum(v[0]))),
        "dwt2" => (vec![x], Box::new(|t, v| t.dwt2(v[0]))),
        "iwt2" => (vec![r(s(1, 8, 3, 3))], Box::new(|t, v| t.iwt2(v[0]))),
        "cdc" | "adc" | "hmdc" | "vmdc" => {
            let branch = match name {
                "cdc" => Branch::Cdc,
                "adc" => Branch::Adc,
                "hmdc" => Branch::Hmdc,
                _ => Branch::Vmdc,
            };
            (vec![r(s(3, 2, 3, 3))], Box::new(move |t, v| t.kernel_transform(v[0], branch)))
        }
        "weighted_sum" => (
            vec![r(s(2, 2, 3, 3)), r(s(2, 2, 3, 3)), r(s(2, 2, 3, 3)), r(s(1, 3, 1, 1))],
            Box::new(|t, v| t.weighted_sum(&v[..3], v[3])),
        ),
        "charbonnier" => (vec![x, r(s(1, 4, 6, 6))], Box::new(|t, v| t.charbonnier(v[0], v[1], T::lit(1e-3)))),
        other => return Err(unknown(other)),
    };
    Ok(Case {
        verify: (0..inputs.len()).collect(),
        inputs,
        loss: Box::new(move |t, v| {
            let y = op(t, v)?;
            probe_loss(t, y, 2)
        }),
        check: GradCheck { step: OP_STEP, max_coords: 48, seed: 1 },
    })
}

/// Differentiates a block with respect to its inputs and every parameter,
/// all drawn uniformly so no parameter sits at a degenerate initial value.
fn block_case<T, B, F>(
    build: impl FnOnce(&mut Builder<'_, T>) -> Result<B>,
    inputs: Vec<Tensor<T>>,
    forward: F,
) -> Result<Case<T>>
where
    T: Scalar,
    B: 'static,
    F: Fn(&B, &mut Graph<'_, T>, &[Var]) -> Result<Var> + 'static,
{
    let mut store = ParamStore::new();
    let mut init = Init::new(7);
    let block = build(&mut Builder::new(&mut store, &mut init))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in &names {
        let shape = store.by_name(n).expect("listed").shape();
        store.set(n, rand_t(shape, &mut rng, -0.5, 0.5))?;
    }
    let k = inputs.len();
    let mut all = inputs;
    all.extend(store.iter().map(|p| p.value.clone()));
    Ok(Case {
        verify: (0..all.len()).collect(),
        inputs: all,
        loss: Box::new(move |tape, vars| {
            let overrides: Vec<(&str, Var)> = names.iter().map(String::as_str).zip(vars[k..].iter().copied()).collect();
            let mut g = store.bind_with(tape, &overrides)?;
            let y = forward(&block, &mut g, &vars[..k])?;
            probe_loss(g.tape, y, 17)
        }),
        check: GradCheck { step: BLOCK_STEP, max_coords: 8, seed: 3 },
    })
}

fn block<T: Scalar>(name: &str) -> Result<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<T> = rand_t(Shape::new(1, 8, 8, 8), &mut rng, -1.0, 1.0);
    match name {
        "resblock" => block_case(|b| ResBlock::build(b, "res", 8), vec![x], |m, g, v| m.forward(g, v[0])),
        "dac" => block_case(|b| Dac::build(b, "dac", 8, 8), vec![x], |m, g, v| m.forward(g, v[0])),
        "fse" => block_case(|b| Fse::build(b, "fse", 8, FseOptions::default()), vec![x], |m, g, v| m.forward(g, v[0])),
        "dru" => block_case(|b| Dru::build(b, "dru", 8), vec![x], |m, g, v| m.forward(g, v[0])),
        "dfse" => block_case(
            |b| Fse::build(b, "dfse", 8, FseOptions { pre: Some(true), dru: true }),
            vec![x],
            |m, g, v| m.forward(g, v[0]),
        ),
        "fsas" => block_case(|b| Fsas::build(b, "fsas", 8, 4), vec![x], |m, g, v| m.forward(g, v[0])),
        "fam" => {
            let y = rand_t(Shape::new(1, 8, 8, 8), &mut rng, -1.0, 1.0);
            block_case(|b| Fam::build(b, "fam", 8, 4), vec![x, y], |m, g, v| m.forward(g, v[0], v[1]))
        }
        other => Err(unknown(other)),
    }
}

/// Charbonnier loss of the default network on a 16×16 input, differentiated
/// with respect to the shallow conv weights. The zero-initialized head is
/// replaced by random weights so gradients reach the body.
fn network<T: Scalar>() -> Result<Case<T>> {
    let mut net = MoireNet::<f32>::build(&NetworkConfig::default())?.cast::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let head = net.params().by_name("head.weight").expect("head exists").shape();
    net.params_mut().set("head.weight", rand_t(head, &mut rng, -0.1, 0.1))?;
    let input: Tensor<T> = rand_t(Shape::new(1, 3, 16, 16), &mut rng, 0.0, 1.0);
    let target: Tensor<T> = rand_t(Shape::new(1, 3, 16, 16), &mut rng, 0.0, 1.0);
    let weight = net.params().by_name("shallow.weight").expect("shallow exists").clone();
    Ok(Case {
        inputs: vec![weight],
        verify: vec![0],
        loss: Box::new(move |tape, v| {
            let mut g = net.params().bind_with(tape, &[("shallow.weight", v[0])])?;
            let x = g.tape.constant(input.clone());
            let y = net.forward_graph(&mut g, x)?;
            let t = g.tape.constant(target.clone());
            g.tape.charbonnier(y, t, T::lit(1e-3))
        }),
        check: GradCheck { step: NETWORK_STEP, max_coords: 24, seed: 11 },
    })
}

fn case<T: Scalar>(name: &str) -> Result<Case<T>> {
    if name == NETWORK {
        network()
    } else if BLOCKS.contains(&name) {
        block(name)
    } else {
        primitive(name)
    }
}

/// Runs one named check.
pub fn run(name: &str, precision: Precision) -> Result<CheckResult> {
    let name = all_names().into_iter().find(|n| *n == name).ok_or_else(|| unknown(name))?;
    let reference = case::<f64>(name)?;
    let max_rel_error = match precision {
        Precision::F64 => {
            finite_diff_check_subset(reference.loss, &reference.inputs, &reference.verify, &reference.check)?
        }
        Precision::F32 => {
            let c = case::<f32>(name)?;
            mixed_precision_check(c.loss, reference.loss, &c.inputs, &c.verify, &c.check)?
        }
    };
    let threshold = if name == NETWORK { precision.network_threshold() } else { precision.op_threshold() };
    Ok(CheckResult { name, max_rel_error, threshold })
}

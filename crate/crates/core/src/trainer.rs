//! Optimization loop: Charbonnier loss, Adam, cyclic cosine annealing,
//! held-out evaluation and best-checkpoint selection.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMap, Tape};
use crate::checkpoint;
use crate::datagen::Pair;
use crate::error::{Error, Result};
use crate::metrics::{de_db, ser_db, MetricReport};
use crate::network::MoireNet;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Fraction of pairs (taken from the end) held out for validation.
pub const HELD_OUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    /// Defaults to `lr_max / 100`.
    pub lr_min: Option<f64>,
    pub epochs: usize,
    pub batch: usize,
    pub cycles: usize,
    pub seed: u64,
    pub loss_epsilon: f64,
    /// Share of the training split actually used, in `(0, 1]`.
    pub fraction: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 5e-5,
            lr_min: None,
            epochs: 30,
            batch: 2,
            cycles: 1,
            seed: 0,
            loss_epsilon: 1e-3,
            fraction: 1.0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn lr_min(&self) -> f64 {
        self.lr_min.unwrap_or(self.lr_max / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if !(self.lr_max > 0.0) || !(self.lr_min() >= 0.0) || self.lr_min() > self.lr_max {
            return bad(format!("learning rates min {} / max {}", self.lr_min(), self.lr_max));
        }
        if self.batch == 0 || self.cycles == 0 || self.epochs == 0 {
            return bad("epochs, batch and cycles must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction {} outside (0, 1]", self.fraction));
        }
        if !(self.loss_epsilon > 0.0) {
            return bad("loss_epsilon must be positive".into());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Mean of `√(d² + ε²)` over all elements.
pub fn charbonnier_loss(pred: &Tensor<f32>, target: &Tensor<f32>, eps: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = tape.charbonnier(p, t, eps)?;
    Ok(tape.value(l).data()[0])
}

/// `η(t) = lr_min + ½(lr_max − lr_min)(1 + cos(π·(t mod T)/T))`,
/// `T = total_steps / cycles`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let period = (total_steps.max(1) as f64 / cfg.cycles.max(1) as f64).max(f64::MIN_POSITIVE);
    let phase = (step as f64).rem_euclid(period) / period;
    let (hi, lo) = (cfg.lr_max, cfg.lr_min());
    lo + 0.5 * (hi - lo) * (1.0 + (PI * phase).cos())
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &GradMap<f32>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("{} moments for {} parameters", self.m.len(), params.len())));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, (name, value)) in params.values_mut().enumerate() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != value.shape() || self.m[i].shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!("gradient {name}: {} vs {}", g.shape(), value.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((p, &gi), (mi, vi)) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gi = gi as f64;
                let mn = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * gi;
                let vn = ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Index ranges `(train, held_out)` for `n` pairs: the last 10% (at least
/// one pair when `n ≥ 2`) are held out; a single pair serves as both.
pub fn split(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    match n {
        0 => (0..0, 0..0),
        1 => (0..1, 0..1),
        _ => {
            let held = ((n as f64 * HELD_OUT).floor() as usize).max(1);
            (0..n - held, n - held..n)
        }
    }
}

/// Stacks same-shape `(1, c, h, w)` images along the batch axis.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?.shape();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first || first.n != 1 {
            return Err(Error::ShapeMismatch(format!("cannot stack {} with {}", img.shape(), first)));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(Shape::new(images.len(), first.c, first.h, first.w), data)
}

/// Network output vs clean, and the moiré input vs clean baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub output: MetricReport,
    pub input: MetricReport,
    pub count: usize,
}

/// Mean metrics over `pairs`; outputs are clamped to `[0, 1]` first.
pub fn evaluate(net: &MoireNet<f32>, pairs: &[Pair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut inp = Vec::with_capacity(pairs.len());
    for p in pairs {
        let y = net.forward(&p.moire)?.map(|v| v.clamp(0.0, 1.0));
        out.push(MetricReport::measure(&y, &p.clean)?);
        inp.push(MetricReport::measure(&p.moire, &p.clean)?);
    }
    Ok(EvalReport {
        output: MetricReport::mean(&out).expect("non-empty"),
        input: MetricReport::mean(&inp).expect("non-empty"),
        count: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Held-out metrics of the untouched moiré inputs.
    pub input_baseline: MetricReport,
}

impl TrainReport {
    pub fn best(&self) -> &EpochReport {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Trains `net` in place on `pairs`; on return `net` holds the parameters
/// of the best held-out epoch, which are also written to `checkpoint` if
/// given.
pub fn train(
    net: &mut MoireNet<f32>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let (train_range, val_range) = split(pairs.len());
    let train_len = ((train_range.len() as f64 * cfg.fraction).ceil() as usize).clamp(1, train_range.len());
    let train_set = &pairs[train_range.start..train_range.start + train_len];
    let val_set = &pairs[val_range];
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    log::info!(
        "training on {} pairs, validating on {}, {} steps over {} epochs",
        train_set.len(),
        val_set.len(),
        total_steps,
        cfg.epochs
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let input_baseline = evaluate(net, val_set)?.input;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_max;
        for chunk in order.chunks(cfg.batch) {
            let moire = stack(&chunk.iter().map(|&i| &train_set[i].moire).collect::<Vec<_>>())?;
            let clean = stack(&chunk.iter().map(|&i| &train_set[i].clean).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let mut g = net.params().bind(&mut tape)?;
            let x = g.tape.constant(moire);
            let y = net.forward_graph(&mut g, x)?;
            let t = tape.constant(clean);
            let loss = tape.charbonnier(y, t, cfg.loss_epsilon as f32)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite);
            }
            let mut grads = tape.backward(loss)?;
            drop(tape);
            if let Some(max) = cfg.clip_norm {
                let norm = grads.global_norm() as f64;
                if norm > max {
                    grads.scale((max / norm) as f32);
                }
            }
            lr = cosine_lr(step, total_steps, cfg);
            adam.step(net.params_mut(), &grads, lr)?;
            loss_sum += loss_value;
            step += 1;
        }
        let val = evaluate(net, val_set)?.output;
        let report = EpochReport {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lr,
            val_psnr: val.psnr_db,
            val_ssim: val.ssim,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} lr {:.3e} val {}",
            report.loss,
            report.lr,
            MetricReport { psnr_db: report.val_psnr, ssim: report.val_ssim }
        );
        if best.as_ref().is_none_or(|(_, p, _)| report.val_psnr > *p) {
            best = Some((epoch, report.val_psnr, net.params().clone()));
        }
        epochs.push(report);
    }

    let best_epoch = match best {
        Some((epoch, _, params)) => {
            *net = MoireNet::from_params(net.config(), params)?;
            epoch
        }
        None => 0,
    };
    if let Some(path) = checkpoint_path {
        checkpoint::save(net, path)?;
    }
    Ok(TrainReport { epochs, best_epoch, train_pairs: train_set.len(), val_pairs: val_set.len(), input_baseline })
}

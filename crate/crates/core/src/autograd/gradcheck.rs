//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Settings for [`finite_diff_check_subset`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-4, max_coords: usize::MAX, seed: 0 }
    }
}

/// Reduces a tensor-valued output to `Σ out ⊙ r` with a fixed random `r`,
/// so every output coordinate contributes to the checked scalar.
pub fn probe_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(tape.shape(out), |_, _, _, _| T::lit(rng.gen_range(-1.0..1.0)));
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    tape.sum(prod)
}

/// Checks every coordinate of every input. Returns the maximum over
/// coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    finite_diff_check_subset(f, inputs, &all, &GradCheck { step, ..GradCheck::default() })
}

/// Like [`finite_diff_check`] but only verifies the inputs listed in `verify`,
/// subsampling coordinates as configured.
pub fn finite_diff_check_subset<T, F>(f: F, inputs: &[Tensor<T>], verify: &[usize], cfg: &GradCheck) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    compare(&f, &f, inputs, inputs, verify, cfg)
}

/// Checks gradients computed at precision `T` against central differences of
/// `reference`, an `f64` evaluation of the same function at the same point.
pub fn mixed_precision_check<T, F, R>(
    f: F,
    reference: R,
    inputs: &[Tensor<T>],
    verify: &[usize],
    cfg: &GradCheck,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    R: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    compare(&f, &reference, inputs, &wide, verify, cfg)
}

fn record<U: Scalar>(f: &impl Fn(&mut Tape<U>, &[Var]) -> Result<Var>, vals: &[Tensor<U>]) -> Result<(Tape<U>, Var)> {
    let mut tape = Tape::new();
    let vars =
        vals.iter().enumerate().map(|(i, t)| tape.param(format!("input{i}"), t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    Ok((tape, loss))
}

fn compare<T: Scalar, U: Scalar>(
    f: &impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    numeric_f: &impl Fn(&mut Tape<U>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    numeric_inputs: &[Tensor<U>],
    verify: &[usize],
    cfg: &GradCheck,
) -> Result<f64> {
    let (tape, loss) = record(f, inputs)?;
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for &i in verify {
        let analytic = grads.get(&format!("input{i}")).expect("input gradient present");
        let n = inputs[i].numel();
        let coords: Vec<usize> =
            if n > cfg.max_coords { sample(&mut rng, n, cfg.max_coords).into_vec() } else { (0..n).collect() };
        let mut probe = numeric_inputs.to_vec();
        for off in coords {
            let base = numeric_inputs[i].data()[off];
            let mut at = |delta: f64| -> Result<f64> {
                let shape = numeric_inputs[i].shape();
                let mut data = numeric_inputs[i].data().to_vec();
                data[off] = base + U::lit(delta);
                probe[i] = Tensor::from_vec(shape, data)?;
                let (t, l) = record(numeric_f, &probe)?;
                Ok(t.value(l).data()[0].as_f64())
            };
            let numeric = (at(cfg.step)? - at(-cfg.step)?) / (2.0 * cfg.step);
            let a = analytic.data()[off].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

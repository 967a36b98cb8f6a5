//! MoiréNet assembly: shallow features, a wavelet U-Net encoder with
//! attention fusion, an adaptive bottleneck, a mixed-upsampler decoder and a
//! residual output `I + F(I)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{Block, Conv, Fam, Fsas, Fse, FseOptions};
use crate::error::{Error, Result};
use crate::params::{Builder, Graph, Init, ParamStore};
use crate::tensor::{ConvGeom, Pad, Scalar, Tensor};

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    pub scales: usize,
    pub dac_enabled: bool,
    pub dru_enabled: bool,
    pub fsas_enabled: bool,
    pub fam_enabled: bool,
    pub groups: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            widths: vec![32, 64, 128],
            scales: 3,
            dac_enabled: true,
            dru_enabled: true,
            fsas_enabled: true,
            fam_enabled: true,
            groups: 4,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Default layout with the given widths (one scale per width).
    pub fn with_widths(widths: &[usize]) -> Self {
        NetworkConfig { widths: widths.to_vec(), scales: widths.len(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::BadConfig("scales must be at least 1".into()));
        }
        if self.widths.len() != self.scales {
            return Err(Error::BadConfig(format!("{} widths for {} scales", self.widths.len(), self.scales)));
        }
        if self.groups == 0 {
            return Err(Error::BadConfig("groups must be at least 1".into()));
        }
        for &w in &self.widths {
            if w == 0 || w % (2 * self.groups) != 0 {
                return Err(Error::BadConfig(format!("width {w} is not a positive multiple of {}", 2 * self.groups)));
            }
        }
        Ok(())
    }

    /// Sorted-key JSON, as stored in checkpoints.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// Spatial multiple inputs are padded to.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }
}

#[derive(Debug, Clone)]
struct Level {
    stage: Fse,
    fam: Option<Fam>,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
enum Upsample {
    Shuffle(Conv),
    Transposed(Conv),
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Upsample,
    fam: Option<Fam>,
}

#[derive(Debug, Clone)]
struct Layers {
    shallow: Conv,
    levels: Vec<Level>,
    bottleneck: Fse,
    fsas: Option<Fsas>,
    /// Ordered from the deepest level upwards.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

/// A built network: configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct MoireNet<T: Scalar = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    layers: Layers,
}

impl<T: Scalar> MoireNet<T> {
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let layers = build_layers(&mut Builder::new(&mut params, &mut init), config)?;
        Ok(MoireNet { config: config.clone(), params, layers })
    }

    /// Rebuilds the wiring for `config` and adopts `params`, which must
    /// carry exactly the names and shapes the config produces.
    pub fn from_params(config: &NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::build(config)?;
        if fresh.params.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config builds {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (want, got) in fresh.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.rank != got.rank {
                return Err(Error::ConfigMismatch(format!(
                    "expected {} {}, got {} {}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(MoireNet { config: config.clone(), params, layers: fresh.layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Parameter counts grouped by top-level module, in build order.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.params.iter() {
            let module = p.name.split('.').next().unwrap_or_default();
            match out.last_mut() {
                Some((m, n)) if m == module => *n += p.value.numel(),
                _ => out.push((module.to_string(), p.value.numel())),
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> MoireNet<U> {
        MoireNet { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    /// Records the forward pass of an `(n, 3, h, w)` batch on a bound graph.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, input: Var) -> Result<Var> {
        let s = g.tape.shape(input);
        if s.c != 3 {
            return Err(Error::NotRgb(s.c));
        }
        let m = self.config.spatial_multiple();
        let pad = Pad::new(0, s.h.next_multiple_of(m) - s.h, 0, s.w.next_multiple_of(m) - s.w);
        let x0 = if pad.is_zero() { input } else { g.tape.pad_reflect(input, pad)? };

        let l = &self.layers;
        let mut x = l.shallow.forward(g, x0)?;
        let mut skips = Vec::with_capacity(l.levels.len());
        for level in &l.levels {
            let y = level.stage.forward(g, x)?;
            x = fuse(g, level.fam.as_ref(), x, y)?;
            skips.push(x);
            if let Some(down) = &level.down {
                x = down.forward(g, x)?;
            }
        }
        x = l.bottleneck.forward(g, x)?;
        if let Some(fsas) = &l.fsas {
            x = fsas.forward(g, x)?;
        }
        for (dec, &skip) in l.decoder.iter().zip(skips.iter().rev().skip(1)) {
            x = match &dec.up {
                Upsample::Shuffle(conv) => {
                    let y = conv.forward(g, x)?;
                    g.tape.pixel_shuffle(y, 2)?
                }
                Upsample::Transposed(conv) => conv.forward(g, x)?,
            };
            x = fuse(g, dec.fam.as_ref(), skip, x)?;
        }
        let residual = l.head.forward(g, x)?;
        let out = g.tape.add(x0, residual)?;
        if pad.is_zero() {
            Ok(out)
        } else {
            g.tape.crop(out, 0, 0, s.h, s.w)
        }
    }

    /// Forward pass on a plain tensor; no clamping.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut g = self.params.bind(&mut tape)?;
        let x = g.tape.constant(input.clone());
        let y = self.forward_graph(&mut g, x)?;
        Ok(tape.value(y).clone())
    }
}

fn fuse<T: Scalar>(g: &mut Graph<'_, T>, fam: Option<&Fam>, low: Var, high: Var) -> Result<Var> {
    match fam {
        Some(f) => f.forward(g, low, high),
        None => g.tape.add(low, high),
    }
}

fn build_layers<T: Scalar>(b: &mut Builder<'_, T>, cfg: &NetworkConfig) -> Result<Layers> {
    let w = &cfg.widths;
    let g = cfg.groups;
    let shallow = Conv::same(b, "shallow", 3, w[0], 3, 1)?;
    let mut levels = Vec::with_capacity(cfg.scales);
    for i in 0..cfg.scales {
        let opts = if i == 0 {
            FseOptions { pre: Some(cfg.dac_enabled), dru: cfg.dru_enabled }
        } else {
            FseOptions::default()
        };
        let stage = Fse::build(b, &format!("enc{i}.stage"), w[i], opts)?;
        let fam = if cfg.fam_enabled { Some(Fam::build(b, &format!("enc{i}.fam"), w[i], g)?) } else { None };
        let down = if i + 1 < cfg.scales {
            Some(Conv::build(b, &format!("down{i}"), w[i], w[i + 1], 3, ConvGeom::new(2, 1, 1))?)
        } else {
            None
        };
        levels.push(Level { stage, fam, down });
    }
    let last = w[cfg.scales - 1];
    let bottleneck = Fse::build(b, "bottleneck.fse", last, FseOptions::default())?;
    let fsas = if cfg.fsas_enabled { Some(Fsas::build(b, "bottleneck.fsas", last, g)?) } else { None };
    let mut decoder = Vec::with_capacity(cfg.scales - 1);
    for i in (0..cfg.scales - 1).rev() {
        let up = if i == 0 {
            Upsample::Transposed(Conv::transposed(b, &format!("up{i}"), w[i + 1], w[i], 4, 2, 1)?)
        } else {
            Upsample::Shuffle(Conv::same(b, &format!("up{i}"), w[i + 1], 4 * w[i], 1, 1)?)
        };
        let fam = if cfg.fam_enabled { Some(Fam::build(b, &format!("dec{i}.fam"), w[i], g)?) } else { None };
        decoder.push(DecoderLevel { up, fam });
    }
    let head = Conv::zeroed(b, "head", w[0], 3, 3)?;
    Ok(Layers { shallow, levels, bottleneck, fsas, decoder, head })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Shape;

    fn tiny() -> NetworkConfig {
        NetworkConfig { widths: vec![8, 16], scales: 2, groups: 2, seed: 3, ..NetworkConfig::default() }
    }

    fn image(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    fn names(cfg: &NetworkConfig) -> BTreeSet<String> {
        MoireNet::<f32>::build(cfg).unwrap().params().names().map(String::from).collect()
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let bad = [
            NetworkConfig { scales: 2, ..NetworkConfig::default() },
            NetworkConfig { widths: vec![32, 60, 128], ..NetworkConfig::default() },
            NetworkConfig { groups: 0, ..NetworkConfig::default() },
            NetworkConfig { widths: vec![], scales: 0, ..NetworkConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(MoireNet::<f32>::build(&cfg), Err(Error::BadConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let json = tiny().canonical_json();
        let keys: Vec<&str> =
            ["dac_enabled", "dru_enabled", "fam_enabled", "fsas_enabled", "groups", "scales", "seed", "widths"]
                .to_vec();
        let mut last = 0;
        for k in keys {
            let at = json.find(&format!("\"{k}\"")).unwrap();
            assert!(at >= last, "{k} out of order in {json}");
            last = at;
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MoireNet::<f32>::build(&tiny()).unwrap();
        let b = MoireNet::<f32>::build(&tiny()).unwrap();
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.name, q.name);
            assert!(p.value.bit_eq(&q.value));
        }
        let c = MoireNet::<f32>::build(&NetworkConfig { seed: 4, ..tiny() }).unwrap();
        assert!(!a.params().by_name("shallow.weight").unwrap().bit_eq(c.params().by_name("shallow.weight").unwrap()));
    }

    #[test]
    fn identity_at_init_and_shape_contract() {
        let net = MoireNet::<f32>::build(&tiny()).unwrap();
        for (i, shape) in
            [Shape::new(1, 3, 16, 16), Shape::new(2, 3, 15, 9), Shape::new(1, 3, 8, 13)].into_iter().enumerate()
        {
            let x = image(shape, i as u64);
            assert!(net.forward(&x).unwrap().bit_eq(&x));
        }
        let net = MoireNet::<f32>::build(&NetworkConfig::with_widths(&[8, 16, 32])).unwrap();
        let x = image(Shape::new(1, 3, 63, 61), 9);
        assert!(net.forward(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn trained_head_changes_output_with_same_shape() {
        let mut net = MoireNet::<f32>::build(&tiny()).unwrap();
        let s = net.params().by_name("head.weight").unwrap().shape();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        net.params_mut().set("head.weight", Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-0.1..0.1))).unwrap();
        let x = image(Shape::new(1, 3, 13, 11), 2);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x) > 0.0);
        assert!(y.bit_eq(&net.forward(&x).unwrap()));
    }

    #[test]
    fn rejects_non_rgb() {
        let net = MoireNet::<f32>::build(&tiny()).unwrap();
        assert!(matches!(net.forward(&image(Shape::new(1, 4, 8, 8), 0)), Err(Error::NotRgb(4))));
    }

    #[test]
    fn dac_switch_adds_four_kernels_four_biases_and_alpha() {
        let on = MoireNet::<f32>::build(&tiny()).unwrap();
        let off = MoireNet::<f32>::build(&NetworkConfig { dac_enabled: false, ..tiny() }).unwrap();
        let w0 = tiny().widths[0];
        let kernel = w0 * w0 * 9;
        assert_eq!(on.count_params() - off.count_params(), 4 * kernel + 4 * w0 + 5);
        let only_on: Vec<String> =
            names(&tiny()).difference(&names(&NetworkConfig { dac_enabled: false, ..tiny() })).cloned().collect();
        assert_eq!(only_on.len(), 9);
        assert!(only_on.iter().all(|n| n.starts_with("enc0.stage.pre.")));
    }

    #[test]
    fn ablation_switches_touch_only_their_modules() {
        let full = names(&tiny());
        let diff = |cfg: NetworkConfig| -> Vec<String> { full.symmetric_difference(&names(&cfg)).cloned().collect() };
        assert!(diff(NetworkConfig { dru_enabled: false, ..tiny() }).iter().all(|n| n.starts_with("enc0.stage.")));
        assert!(diff(NetworkConfig { fsas_enabled: false, ..tiny() })
            .iter()
            .all(|n| n.starts_with("bottleneck.fsas.")));
        let fam = diff(NetworkConfig { fam_enabled: false, ..tiny() });
        assert!(!fam.is_empty());
        assert!(fam.iter().all(|n| n.contains(".fam.")));
    }

    #[test]
    fn param_count_matches_hand_enumeration() {
        let cfg = NetworkConfig {
            widths: vec![8],
            scales: 1,
            dac_enabled: false,
            dru_enabled: false,
            fsas_enabled: false,
            fam_enabled: false,
            groups: 2,
            seed: 0,
        };
        let conv = |cin: usize, cout: usize, k: usize, g: usize| cout * (cin / g) * k * k + cout;
        let res = 2 * conv(8, 8, 3, 1);
        let fse = conv(8, 8, 3, 8) + conv(32, 32, 3, 4) + 2 * res;
        let want = conv(3, 8, 3, 1) + conv(8, 8, 3, 1) + fse + fse + conv(8, 3, 3, 1);
        let net = MoireNet::<f32>::build(&cfg).unwrap();
        assert_eq!(net.count_params(), want);
        let total: usize = net.breakdown().iter().map(|(_, n)| n).sum();
        assert_eq!(total, want);
    }

    #[test]
    fn parameter_count_stable_across_forward() {
        let net = MoireNet::<f32>::build(&tiny()).unwrap();
        let before = net.count_params();
        net.forward(&image(Shape::new(1, 3, 8, 8), 0)).unwrap();
        assert_eq!(net.count_params(), before);
    }

    #[test]
    fn from_params_rejects_other_config() {
        let net = MoireNet::<f32>::build(&tiny()).unwrap();
        let other = NetworkConfig { fsas_enabled: false, ..tiny() };
        assert!(matches!(MoireNet::from_params(&other, net.params().clone()), Err(Error::ConfigMismatch(_))));
        assert!(MoireNet::from_params(&tiny(), net.params().clone()).is_ok());
    }
}

//! Synthetic (clean, moiré) pairs, 8-bit PNG I/O and the on-disk dataset
//! layout.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-channel phase offsets of the first carrier, radians.
pub const CHANNEL_PHASES: [f64; 3] = [0.0, 0.7, 1.4];
/// Highest spatial frequency used by [`synth_base`], cycles/px.
pub const BASE_MAX_FREQ: f64 = 0.2;
/// Supersampling factor of the screen renderer.
pub const SCREEN_OVERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Sinus,
    Screen,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinus" => Ok(SynthMode::Sinus),
            "screen" => Ok(SynthMode::Screen),
            other => Err(Error::BadConfig(format!("unknown synthesis mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub mode: SynthMode,
    pub amplitude: f64,
    pub f1: f64,
    pub f2: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 64, mode: SynthMode::Sinus, amplitude: 0.3, f1: 0.45, f2: 0.40, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::BadConfig(format!("amplitude {} outside [0, 1]", self.amplitude)));
        }
        for f in [self.f1, self.f2] {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::BadConfig(format!("carrier frequency {f} outside (0, 0.5)")));
            }
        }
        if self.size < 16 {
            return Err(Error::BadConfig(format!("size {} below 16", self.size)));
        }
        Ok(())
    }
}

/// Random quantities of one synthesized pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthDraws {
    /// Carrier orientations, radians.
    pub theta1: f64,
    pub theta2: f64,
    pub phase1: f64,
    pub phase2: f64,
    /// Lattice rotation of the screen camera, radians.
    pub screen_angle: f64,
    /// Offset of the display lattice, in display columns.
    pub screen_shift: (f64, f64),
}

impl SynthDraws {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta1 = rng.gen_range(0.0..PI);
        let delta = rng.gen_range(-5.0f64..5.0).to_radians();
        let angle = rng.gen_range(1.0f64..5.0).to_radians();
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        SynthDraws {
            theta1,
            theta2: theta1 + delta,
            phase1: rng.gen_range(0.0..2.0 * PI),
            phase2: rng.gen_range(0.0..2.0 * PI),
            screen_angle: sign * angle,
            screen_shift: (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)),
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural clean image: colour gradients, soft-edged rectangles and
/// low-frequency texture, all in `[0, 1]`.
pub fn synth_base(seed: u64, size: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mut img = vec![0.0f64; 3 * size * size];

    let grad: Vec<[f64; 3]> =
        (0..3).map(|_| [rng.gen_range(0.3..0.7), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)]).collect();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let g = grad[c];
                img[(c * size + y) * size + x] = g[0] + g[1] * (x as f64 / n - 0.5) + g[2] * (y as f64 / n - 0.5);
            }
        }
    }

    let rects = rng.gen_range(2..6);
    for _ in 0..rects {
        let w = rng.gen_range(0.15..0.5) * n;
        let h = rng.gen_range(0.15..0.5) * n;
        let x0 = rng.gen_range(-0.1..0.9) * n;
        let y0 = rng.gen_range(-0.1..0.9) * n;
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
        let opacity = rng.gen_range(0.4..0.9);
        let edge = rng.gen_range(3.0..6.0);
        for y in 0..size {
            let yf = y as f64;
            let ay = smoothstep(y0 - edge, y0 + edge, yf) * (1.0 - smoothstep(y0 + h - edge, y0 + h + edge, yf));
            for x in 0..size {
                let xf = x as f64;
                let ax = smoothstep(x0 - edge, x0 + edge, xf) * (1.0 - smoothstep(x0 + w - edge, x0 + w + edge, xf));
                let a = opacity * ax * ay;
                for c in 0..3 {
                    let v = &mut img[(c * size + y) * size + x];
                    *v = (1.0 - a) * *v + a * colour[c];
                }
            }
        }
    }

    let waves = rng.gen_range(2..5);
    for _ in 0..waves {
        let f = rng.gen_range(0.02..BASE_MAX_FREQ);
        let dir = rng.gen_range(0.0..2.0 * PI);
        let (fx, fy) = (f * dir.cos(), f * dir.sin());
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.04));
        for y in 0..size {
            for x in 0..size {
                let s = (2.0 * PI * (fx * x as f64 + fy * y as f64) + phase).sin();
                for c in 0..3 {
                    img[(c * size + y) * size + x] += amp[c] * s;
                }
            }
        }
    }

    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec(Shape::new(1, 3, size, size), data).expect("finite base image")
}

fn check_rgb(img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::NotRgb(s.c));
    }
    Ok(())
}

/// `(clean, moire)` for `base`, with random draws taken from `cfg.seed`.
pub fn synthesize_pair(base: &Tensor<f32>, cfg: &SynthConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    synthesize_pair_with(base, cfg, &SynthDraws::from_seed(cfg.seed))
}

/// As [`synthesize_pair`] with explicit draws.
pub fn synthesize_pair_with(
    base: &Tensor<f32>,
    cfg: &SynthConfig,
    draws: &SynthDraws,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    cfg.validate()?;
    check_rgb(base)?;
    let moire = match cfg.mode {
        SynthMode::Sinus => sinus_overlay(base, cfg, draws),
        SynthMode::Screen => screen_capture(base, cfg.amplitude, draws),
    };
    let clamped = moire.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let ratio = clamped as f64 / moire.len().max(1) as f64;
    if ratio > 0.02 && cfg.amplitude <= 0.4 {
        log::warn!("clamping touched {:.1}% of pixels", 100.0 * ratio);
    }
    let data = moire.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((base.clone(), Tensor::from_vec(base.shape(), data)?))
}

fn sinus_overlay(base: &Tensor<f32>, cfg: &SynthConfig, d: &SynthDraws) -> Vec<f64> {
    let s = base.shape();
    let (c1, s1) = (d.theta1.cos(), d.theta1.sin());
    let (c2, s2) = (d.theta2.cos(), d.theta2.sin());
    let mut out = Vec::with_capacity(s.numel());
    for (c, &offset) in CHANNEL_PHASES.iter().enumerate() {
        for y in 0..s.h {
            for x in 0..s.w {
                let (xf, yf) = (x as f64, y as f64);
                let a = (2.0 * PI * cfg.f1 * (xf * c1 + yf * s1) + d.phase1 + offset).sin();
                let b = (2.0 * PI * cfg.f2 * (xf * c2 + yf * s2) + d.phase2).sin();
                let v = base.at(0, c, y, x) as f64;
                out.push(if cfg.amplitude == 0.0 { v } else { v + cfg.amplitude * a * b });
            }
        }
    }
    out
}

/// Bilinear sample of one channel with edge clamping.
fn sample(base: &Tensor<f32>, c: usize, y: f64, x: f64) -> f64 {
    let s = base.shape();
    let y = y.clamp(0.0, (s.h - 1) as f64);
    let x = x.clamp(0.0, (s.w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = base.at(0, c, y0, x0) as f64 * (1.0 - tx) + base.at(0, c, y0, x1) as f64 * tx;
    let bot = base.at(0, c, y1, x0) as f64 * (1.0 - tx) + base.at(0, c, y1, x1) as f64 * tx;
    top * (1.0 - ty) + bot * ty
}

/// Photographs the image shown on an RGB-stripe display with a Bayer
/// camera, then demosaics. The display is the clean image upsampled
/// [`SCREEN_OVERSAMPLE`]× whose columns carry R, G, B in turn; the camera
/// lattice is rotated against it and each camera pixel box-averages an
/// `r×r` block of display samples. Content stays registered with the clean
/// image.
fn screen_capture(base: &Tensor<f32>, amplitude: f64, d: &SynthDraws) -> Vec<f64> {
    let s = base.shape();
    let r = SCREEN_OVERSAMPLE as f64;
    let (cos, sin) = (d.screen_angle.cos(), d.screen_angle.sin());
    let (cy, cx) = (s.h as f64 / 2.0, s.w as f64 / 2.0);
    let mut mosaic = vec![0.0f64; s.h * s.w];
    for y in 0..s.h {
        for x in 0..s.w {
            let c = bayer_channel(y, x);
            let mut acc = 0.0;
            for sy in 0..SCREEN_OVERSAMPLE {
                for sx in 0..SCREEN_OVERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / r;
                    let px = x as f64 + (sx as f64 + 0.5) / r;
                    // display column under this sample
                    let col = r * (cx + (px - cx) * cos - (py - cy) * sin) + d.screen_shift.1;
                    if (col.floor() as i64).rem_euclid(3) as usize == c {
                        acc += 3.0 * sample(base, c, py - 0.5, px - 0.5);
                    }
                }
            }
            mosaic[y * s.w + x] = acc / (r * r);
        }
    }
    let captured = demosaic(&mosaic, s.h, s.w);
    let mut out = Vec::with_capacity(s.numel());
    for c in 0..3 {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = base.at(0, c, y, x) as f64;
                out.push(if amplitude == 0.0 { v } else { v + amplitude * (captured[(c * s.h + y) * s.w + x] - v) });
            }
        }
    }
    out
}

/// RGGB layout.
fn bayer_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Bilinear demosaic: each missing sample is the mean of the nearest
/// same-colour neighbours in its 3×3 window.
fn demosaic(mosaic: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = if bayer_channel(y, x) == c {
                    mosaic[y * w + x]
                } else {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            let (yy, xx) = (yy as usize, xx as usize);
                            if bayer_channel(yy, xx) == c && (dy.abs() + dx.abs() <= 1 || c != 1) {
                                sum += mosaic[yy * w + xx];
                                n += 1;
                            }
                        }
                    }
                    sum / n.max(1) as f64
                };
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

/// Reads an 8-bit RGB or RGBA PNG as a `(1, 3, h, w)` tensor of `v / 255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let file = File::open(path.as_ref())?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedPng(format!("bit depth {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::UnsupportedPng(format!("colour type {other:?}"))),
    };
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in bytes.chunks_exact(channels).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

fn png_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::UnsupportedPng(other.to_string()),
    }
}

/// Quantizes to bytes: `round(255·v)` (half away from zero), clamped.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    check_rgb(img)?;
    let s = img.shape();
    let mut pixels = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                pixels.push(quantize(img.at(0, c, y, x)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, s.w as u32, s.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::UnsupportedPng(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::UnsupportedPng(e.to_string()))?;
    }
    Ok(out)
}

/// Writes a `(1, 3, h, w)` image as 8-bit RGB.
pub fn save_png(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_png(img)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: SynthMode,
    pub amplitude: f64,
    pub f1: f64,
    pub f2: f64,
    pub size: usize,
    pub seed: u64,
    pub count: usize,
}

fn pair_name(i: usize) -> String {
    format!("{i:05}.png")
}

/// Writes `count` pairs under `dir/clean` and `dir/moire` plus `manifest.json`.
/// Pair `i` uses the `i`-th draw of a generator seeded with `cfg.seed`.
pub fn generate_dataset(dir: impl AsRef<Path>, count: usize, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("clean"))?;
    fs::create_dir_all(dir.join("moire"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..count {
        let seed = rng.next_u64();
        let base = synth_base(seed, cfg.size);
        let (clean, moire) = synthesize_pair(&base, &SynthConfig { seed, ..cfg.clone() })?;
        save_png(&clean, dir.join("clean").join(pair_name(i)))?;
        save_png(&moire, dir.join("moire").join(pair_name(i)))?;
    }
    let manifest = Manifest {
        mode: cfg.mode,
        amplitude: cfg.amplitude,
        f1: cfg.f1,
        f2: cfg.f2,
        size: cfg.size,
        seed: cfg.seed,
        count,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A loaded training example.
#[derive(Debug, Clone)]
pub struct Pair {
    pub name: String,
    pub clean: Tensor<f32>,
    pub moire: Tensor<f32>,
}

/// Names present in both `clean/` and `moire/`, sorted.
pub fn pair_names(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let list = |sub: &str| -> Result<Vec<String>> {
        let path: PathBuf = dir.join(sub);
        if !path.is_dir() {
            return Err(Error::EmptyDataset(format!("{} is not a directory", path.display())));
        }
        let mut names = Vec::new();
        for entry in fs::read_dir(&path)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.ends_with(".png") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    };
    let clean = list("clean")?;
    let moire = list("moire")?;
    let names: Vec<String> = clean.into_iter().filter(|n| moire.binary_search(n).is_ok()).collect();
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!("no pairs under {}", dir.display())));
    }
    Ok(names)
}

/// Loads every pair of a dataset directory in name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let dir = dir.as_ref();
    pair_names(dir)?
        .into_iter()
        .map(|name| {
            let clean = load_png(dir.join("clean").join(&name))?;
            let moire = load_png(dir.join("moire").join(&name))?;
            if clean.shape() != moire.shape() {
                return Err(Error::ShapeMismatch(format!("pair {name}: {} vs {}", clean.shape(), moire.shape())));
            }
            Ok(Pair { name, clean, moire })
        })
        .collect()
}

use std::fs;

use moirenet::datagen::{
    encode_png, generate_dataset, load_dataset, load_png, save_png, synth_base, synthesize_pair, synthesize_pair_with,
    Manifest, SynthConfig, SynthDraws, SynthMode,
};
use moirenet::metrics::psnr;
use moirenet::{Error, Shape, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Power spectrum of one channel, `|X[ky][kx]|²`, row-major.
fn power_2d(img: &Tensor<f32>, c: usize, remove_mean: bool) -> Vec<f64> {
    let s = img.shape();
    let plane = img.plane(0, c);
    let mean = if remove_mean { plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64 } else { 0.0 };
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(s.w);
    for r in buf.chunks_exact_mut(s.w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(s.h);
    let mut column = vec![Complex::new(0.0, 0.0); s.h];
    for x in 0..s.w {
        for y in 0..s.h {
            column[y] = buf[y * s.w + x];
        }
        col.process(&mut column);
        for y in 0..s.h {
            buf[y * s.w + x] = column[y];
        }
    }
    buf.iter().map(|z| z.norm_sqr()).collect()
}

/// Signed frequency (cycles/px) of DFT bin `k` of length `n`.
fn freq(k: usize, n: usize) -> f64 {
    let k = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
    k / n as f64
}

fn energy_fraction(img: &Tensor<f32>, keep: impl Fn(f64) -> bool) -> f64 {
    let s = img.shape();
    let (mut sel, mut total) = (0.0, 0.0);
    for c in 0..3 {
        let p = power_2d(img, c, true);
        for ky in 0..s.h {
            for kx in 0..s.w {
                let r = freq(ky, s.h).hypot(freq(kx, s.w));
                total += p[ky * s.w + kx];
                if keep(r) {
                    sel += p[ky * s.w + kx];
                }
            }
        }
    }
    sel / total
}

fn residual(clean: &Tensor<f32>, moire: &Tensor<f32>) -> Tensor<f32> {
    let data = moire.data().iter().zip(clean.data()).map(|(m, c)| m - c).collect();
    Tensor::from_vec(clean.shape(), data).unwrap()
}

#[test]
fn base_is_deterministic_and_in_range() {
    assert!(synth_base(7, 32).bit_eq(&synth_base(7, 32)));
    assert!(!synth_base(7, 32).bit_eq(&synth_base(8, 32)));
    for seed in 0..1000 {
        let img = synth_base(seed, 16);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "seed {seed}");
    }
}

#[test]
fn base_is_band_limited() {
    for seed in 0..10 {
        let frac = energy_fraction(&synth_base(seed, 64), |r| r > 0.25);
        assert!(frac < 0.05, "seed {seed}: {frac}");
    }
}

#[test]
fn zero_amplitude_leaves_image_untouched() {
    let base = synth_base(1, 32);
    for mode in [SynthMode::Sinus, SynthMode::Screen] {
        let cfg = SynthConfig { size: 32, amplitude: 0.0, mode, ..SynthConfig::default() };
        let (clean, moire) = synthesize_pair(&base, &cfg).unwrap();
        assert!(clean.bit_eq(&base));
        assert!(moire.bit_eq(&base), "{mode:?}");
    }
}

#[test]
fn sinus_beat_peak_at_frequency_difference() {
    let base = synth_base(2, 64);
    let cfg = SynthConfig { size: 64, amplitude: 0.1, f1: 0.45, f2: 0.40, ..SynthConfig::default() };
    let draws = SynthDraws { theta1: 0.0, theta2: 0.0, ..SynthDraws::from_seed(3) };
    let (clean, moire) = synthesize_pair_with(&base, &cfg, &draws).unwrap();
    let res = residual(&clean, &moire);
    let p = power_2d(&res, 0, false);
    let best = (1..32).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
    assert!((best as f64 - 0.05 * 64.0).abs() <= 1.0, "peak bin {best}");
}

#[test]
fn psnr_falls_as_amplitude_rises() {
    let base = synth_base(4, 64);
    let mut last = f64::INFINITY;
    for amplitude in [0.05, 0.1, 0.2, 0.4] {
        let cfg = SynthConfig { amplitude, ..SynthConfig::default() };
        let (clean, moire) = synthesize_pair(&base, &cfg).unwrap();
        let p = psnr(&moire, &clean).unwrap();
        assert!(p < last, "amplitude {amplitude}: {p} ≥ {last}");
        last = p;
    }
}

#[test]
fn screen_moire_folds_below_bayer_nyquist() {
    // the stripes repeat every 3/4 camera px, above the 0.25 cycles/px
    // Nyquist limit of the red and blue sites; their moiré must alias down
    for seed in 0..5 {
        let base = synth_base(seed, 64);
        let cfg = SynthConfig { mode: SynthMode::Screen, amplitude: 0.5, seed, ..SynthConfig::default() };
        let (clean, moire) = synthesize_pair(&base, &cfg).unwrap();
        let res = residual(&clean, &moire);
        let s = res.shape();
        for c in [0, 2] {
            let p = power_2d(&res, c, true);
            let k = (1..p.len()).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
            let (fy, fx) = (freq(k / s.w, s.h), freq(k % s.w, s.w));
            assert!(fx.abs() < 0.2 && fy.abs() < 0.2, "seed {seed} channel {c}: peak ({fy}, {fx})");
        }
        assert!(psnr(&moire, &clean).unwrap() < 30.0);
    }
}

#[test]
fn config_validation() {
    let base = synth_base(0, 16);
    let bad = [
        SynthConfig { amplitude: 1.5, ..SynthConfig::default() },
        SynthConfig { f1: 0.5, ..SynthConfig::default() },
        SynthConfig { f2: 0.0, ..SynthConfig::default() },
        SynthConfig { size: 8, ..SynthConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(synthesize_pair(&base, &cfg), Err(Error::BadConfig(_))));
    }
    assert!("screen".parse::<SynthMode>().is_ok());
    assert!("moire".parse::<SynthMode>().is_err());
}

#[test]
fn png_round_trip_is_byte_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(Shape::new(1, 3, 5, 7), |_, c, y, x| ((c * 31 + y * 17 + x * 11) % 256) as f32 / 255.0);
    let path = dir.path().join("a.png");
    save_png(&img, &path).unwrap();
    let back = load_png(&path).unwrap();
    assert!(back.bit_eq(&img));
    assert_eq!(encode_png(&back).unwrap(), fs::read(&path).unwrap());
}

#[test]
fn png_rounding_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_vec(Shape::new(1, 3, 1, 2), vec![0.5 / 255.0, 1.5, -0.2, 0.2, 1.0, 0.0]).unwrap();
    let path = dir.path().join("r.png");
    save_png(&img, &path).unwrap();
    let back = load_png(&path).unwrap();
    assert_eq!(back.data(), &[1.0 / 255.0, 1.0, 0.0, 51.0 / 255.0, 1.0, 0.0]);

    assert!(matches!(load_png(dir.path().join("missing.png")), Err(Error::Io(_))));

    let write = |name: &str, color: png::ColorType, depth: png::BitDepth, data: &[u8]| {
        let p = dir.path().join(name);
        let mut enc = png::Encoder::new(fs::File::create(&p).unwrap(), 2, 1);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(data).unwrap();
        p
    };
    let deep = write("deep.png", png::ColorType::Rgb, png::BitDepth::Sixteen, &[0; 12]);
    assert!(matches!(load_png(deep), Err(Error::UnsupportedPng(_))));
    let grey = write("grey.png", png::ColorType::Grayscale, png::BitDepth::Eight, &[0; 2]);
    assert!(matches!(load_png(grey), Err(Error::UnsupportedPng(_))));
    let rgba = write("rgba.png", png::ColorType::Rgba, png::BitDepth::Eight, &[255, 0, 51, 7, 0, 255, 0, 9]);
    let t = load_png(rgba).unwrap();
    assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
    assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 51.0 / 255.0, 0.0]);
}

#[test]
fn dataset_layout_and_reproducibility() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { size: 32, seed: 9, ..SynthConfig::default() };
    let manifest = generate_dataset(a.path(), 4, &cfg).unwrap();
    generate_dataset(b.path(), 4, &cfg).unwrap();
    let stored: Manifest = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(stored, manifest);
    assert_eq!(stored.count, 4);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["amplitude", "count", "f1", "f2", "mode", "seed", "size"]);
    for sub in ["clean", "moire"] {
        let mut names: Vec<String> =
            fs::read_dir(a.path().join(sub)).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["00000.png", "00001.png", "00002.png", "00003.png"]);
        for n in &names {
            assert_eq!(fs::read(a.path().join(sub).join(n)).unwrap(), fs::read(b.path().join(sub).join(n)).unwrap());
        }
    }
    let pairs = load_dataset(a.path()).unwrap();
    assert_eq!(pairs.len(), 4);
    for p in &pairs {
        assert!(psnr(&p.moire, &p.clean).unwrap() < 40.0);
    }
}

#[test]
fn empty_dataset_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
    fs::create_dir_all(dir.path().join("clean")).unwrap();
    fs::create_dir_all(dir.path().join("moire")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
}

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimelgan_core::dataset::{Manifest, ManifestEntry};
use unimelgan_core::discriminators::{SpecDiscConfig, WaveDiscConfig, WaveLayer};
use unimelgan_core::frontend::features::write_features;
use unimelgan_core::frontend::preprocess_waveform;
use unimelgan_core::{Config, Waveform, SAMPLE_RATE};

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn desk_config() -> Config {
    Config::load(workspace_root().join("configs/desk.toml")).expect("configs/desk.toml")
}

/// Narrow models over 8-frame segments; a step takes milliseconds.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.train.batch_size = 2;
    c.train.segment_frames = 8;
    c.train.pretrain_steps = 3;
    c.train.total_steps = 6;
    c.train.checkpoint_interval = 4;
    c.train.seed = 7;
    c.generator.channel_schedule = vec![8, 8, 4, 4];
    c.generator.residual_dilations = vec![1, 3];
    c.wave_disc.layers = vec![
        WaveLayer { channels: 4, kernel: 15, stride: 1, groups: 1 },
        WaveLayer { channels: 8, kernel: 41, stride: 4, groups: 4 },
        WaveLayer { channels: 8, kernel: 5, stride: 1, groups: 1 },
        WaveLayer { channels: 1, kernel: 3, stride: 1, groups: 1 },
    ];
    c.spec_disc.channels = 2;
    c.validate().expect("tiny config");
    c
}

/// `f0` plus five harmonics with decaying amplitudes.
pub fn harmonic(len: usize, f0: f64) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            (1..=6).map(|h| 0.3 / h as f64 * (2.0 * PI * f0 * h as f64 * t).sin()).sum::<f64>() as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

pub fn noise(len: usize, std: f32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len).map(|_| std * (rng.random::<f32>() * 2.0 - 1.0) * 1.7).collect();
    Waveform::new(samples, SAMPLE_RATE)
}

/// Preprocesses each waveform into `dir` and writes `dir/manifest.tsv`.
pub fn write_manifest(dir: &Path, config: &Config, waves: &[Waveform]) -> Manifest {
    std::fs::create_dir_all(dir).unwrap();
    let mut manifest = Manifest::default();
    for (i, w) in waves.iter().enumerate() {
        let p = preprocess_waveform(w, &config.preprocess, &config.mel).expect("preprocess");
        let wave = dir.join(format!("utt{i}.wav"));
        let features = dir.join(format!("utt{i}.umel"));
        p.waveform.write_wav_f32(&wave).unwrap();
        write_features(&features, &p.mel).unwrap();
        manifest.entries.push(ManifestEntry {
            wave,
            features,
            frames: p.mel.frames,
            split: None,
        });
    }
    manifest.write(dir.join("manifest.tsv")).unwrap();
    manifest
}

/// Four short harmonic utterances at different pitches.
pub fn toy_manifest(dir: &Path, config: &Config) -> Manifest {
    let waves: Vec<Waveform> = [110.0, 165.0, 220.0, 330.0].iter().map(|&f| harmonic(12_000, f)).collect();
    write_manifest(dir, config, &waves)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Numpy-style reflection padding: the edge sample is not repeated.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|mut i| {
            while i < 0 || i >= n {
                i = if i < 0 { -i } else { 2 * (n - 1) - i };
            }
            x[i as usize]
        })
        .collect()
}

/// `|STFT|` by direct DFT summation in `f64`, bins-major, from the textbook
/// definition: centred frames of `fft` samples every `hop`, a periodic Hann
/// window of `win` taps centred in the frame.
pub fn dft_magnitude(x: &[f64], fft: usize, hop: usize, win: usize) -> (usize, usize, Vec<f64>) {
    let padded = reflect_pad(x, fft / 2);
    let frames = (padded.len() - fft) / hop + 1;
    let bins = fft / 2 + 1;
    let offset = (fft - win) / 2;
    let window: Vec<f64> = (0..fft)
        .map(|i| {
            if i < offset || i >= offset + win {
                0.0
            } else {
                let n = (i - offset) as f64;
                (PI * n / win as f64).sin().powi(2)
            }
        })
        .collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..fft)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / fft as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let mut out = vec![0.0; bins * frames];
    for t in 0..frames {
        let frame: Vec<f64> = (0..fft).map(|i| padded[t * hop + i] * window[i]).collect();
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in frame.iter().enumerate() {
                let j = (k * i) % fft;
                re += v * cos[j];
                im -= v * sin[j];
            }
            out[k * frames + t] = re.hypot(im);
        }
    }
    (bins, frames, out)
}

/// Spectral convergence and mean absolute log difference (floor 1e-7).
pub fn spectral_terms_oracle(r: &[f64], g: &[f64]) -> (f64, f64) {
    let num: f64 = r.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = r.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mag = r
        .iter()
        .zip(g)
        .map(|(a, b)| (a.max(1e-7).ln() - b.max(1e-7).ln()).abs())
        .sum::<f64>()
        / r.len() as f64;
    (num / den, mag)
}

/// Mean over resolutions of `sc + mag`.
pub fn aux_oracle(x: &[f64], xh: &[f64], set: &[(usize, usize, usize)]) -> f64 {
    set.iter()
        .map(|&(fft, hop, win)| {
            let r = dft_magnitude(x, fft, hop, win).2;
            let g = dft_magnitude(xh, fft, hop, win).2;
            let (sc, mag) = spectral_terms_oracle(&r, &g);
            sc + mag
        })
        .sum::<f64>()
        / set.len() as f64
}

pub const DEFAULT_RESOLUTIONS: [(usize, usize, usize); 3] = [(1024, 120, 600), (2048, 240, 1200), (512, 50, 240)];

pub fn uniform_f64(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// Textbook convolution output length.
pub fn out_len(l: usize, k: usize, s: usize, p: usize) -> usize {
    (l + 2 * p - k) / s + 1
}

/// Average pooling that divides by the in-bounds count.
pub fn pool_oracle(x: &[f32], k: usize, s: usize, p: usize) -> Vec<f32> {
    let n = out_len(x.len(), k, s, p);
    (0..n)
        .map(|o| {
            let lo = (o * s).saturating_sub(p);
            let hi = (o * s + k - p).min(x.len());
            x[lo..hi].iter().map(|&v| v as f64).sum::<f64>() as f32 / (hi - lo) as f32
        })
        .collect()
}

/// Per-scale, per-layer output lengths.
pub fn wave_trace_oracle(c: &WaveDiscConfig, len: usize) -> Vec<Vec<usize>> {
    let mut l = len;
    (0..c.num_scales)
        .map(|k| {
            if k > 0 {
                l = out_len(l, c.pool_kernel, c.pool_stride, c.pool_padding);
            }
            let mut cur = l;
            c.layers
                .iter()
                .map(|layer| {
                    cur = out_len(cur, layer.kernel, layer.stride, layer.kernel / 2);
                    cur
                })
                .collect()
        })
        .collect()
}

/// `(freq, time)` after each layer: 9x9 kernels, then 3x3; time stride 2 on layers 1 to 3.
pub fn spec_trace_oracle(c: &SpecDiscConfig, bins: usize, frames: usize) -> Vec<(usize, usize)> {
    let (mut h, mut w) = (bins, frames);
    let mut out = Vec::new();
    for j in 0..6 {
        let k = if j < 4 { 9 } else { 3 };
        let st = if (1..=3).contains(&j) { 2 } else { 1 };
        h = out_len(h, k, 1, (k - 1) / 2);
        w = out_len(w, k, st, (k - 1) / 2);
        out.push((h, w));
    }
    assert_eq!(c.layers().len(), out.len());
    out
}

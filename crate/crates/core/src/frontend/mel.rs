//! Log-mel features and utterance-wise standardization.

use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::frontend::stft::{stft, StftParams};

/// Natural-log floor applied to mel energies.
pub const MEL_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    #[default]
    Slaney,
    Htk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterNorm {
    /// Each triangle scaled to unit area in Hz (`2 / bandwidth`).
    #[default]
    Slaney,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub fft_size: usize,
    pub hop: usize,
    pub window_length: usize,
    pub sample_rate: u32,
    #[serde(default)]
    pub scale: MelScale,
    #[serde(default)]
    pub norm: FilterNorm,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 100,
            fmin: 0.0,
            fmax: 12_000.0,
            fft_size: 1024,
            hop: 256,
            window_length: 1024,
            sample_rate: SAMPLE_RATE,
            scale: MelScale::Slaney,
            norm: FilterNorm::Slaney,
        }
    }
}

impl MelConfig {
    pub fn stft_params(&self) -> StftParams {
        StftParams::new(self.fft_size, self.hop, self.window_length)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft_params().validate()?;
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel band edges must satisfy 0 <= fmin < fmax <= {} Hz, got {}..{}",
                self.sample_rate / 2,
                self.fmin,
                self.fmax
            )));
        }
        Ok(())
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

fn hz_to_mel(f: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 2595.0 * (1.0 + f / 700.0).log10(),
        MelScale::Slaney => {
            let (f_sp, break_hz) = (200.0 / 3.0, 1000.0);
            let break_mel = break_hz / f_sp;
            let log_step = 6.4f64.ln() / 27.0;
            if f >= break_hz {
                break_mel + (f / break_hz).ln() / log_step
            } else {
                f / f_sp
            }
        }
    }
}

fn mel_to_hz(m: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 700.0 * (10f64.powf(m / 2595.0) - 1.0),
        MelScale::Slaney => {
            let (f_sp, break_hz) = (200.0 / 3.0, 1000.0);
            let break_mel = break_hz / f_sp;
            let log_step = 6.4f64.ln() / 27.0;
            if m >= break_mel {
                break_hz * ((m - break_mel) * log_step).exp()
            } else {
                m * f_sp
            }
        }
    }
}

/// Triangular filters, `n_mels x (fft_size / 2 + 1)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin, cfg.scale), hz_to_mel(cfg.fmax, cfg.scale));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64, cfg.scale))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let scale = match cfg.norm {
                FilterNorm::Slaney => 2.0 / (right - left),
                FilterNorm::None => 1.0,
            };
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let rise = (f - left) / (centre - left);
                let fall = (right - f) / (right - centre);
                weights[m * bins + k] = rise.min(fall).max(0.0) * scale;
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// `weights @ spectrum` for one column of `bins` values.
    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(spectrum).map(|(w, s)| w * s).sum())
            .collect()
    }
}

/// `n_mels x frames` log-mel matrix, row-major (band-major).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub frames: usize,
    pub values: Vec<f32>,
    /// Statistics removed by [`normalize_utterance`]; 0 and 1 until then.
    pub mean: f32,
    pub std: f32,
    pub normalized: bool,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * frames || frames == 0 {
            return Err(Error::Shape(format!(
                "mel matrix of {} values does not form {n_mels} x {frames} with at least one frame",
                values.len()
            )));
        }
        Ok(Self {
            n_mels,
            frames,
            values,
            mean: 0.0,
            std: 1.0,
            normalized: false,
        })
    }

    pub fn at(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.frames + frame]
    }

    /// Frames `[start, start + len)` with the stored statistics kept.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Shape(format!(
                "crop [{start}, {}) outside {} frames",
                start + len,
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.n_mels * len);
        for band in 0..self.n_mels {
            let row = band * self.frames;
            values.extend_from_slice(&self.values[row + start..row + start + len]);
        }
        Ok(Self {
            frames: len,
            values,
            ..self.clone()
        })
    }

    /// Sample mean and population variance over every entry.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }
}

/// Unnormalized `ln(max(mel(|STFT|), 1e-5))` with `len / hop + 1` frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if w.is_empty() {
        return Err(Error::InvalidInput("mel spectrogram of an empty waveform".into()));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            reference: cfg.sample_rate,
            generated: w.sample_rate,
        });
    }
    let bank = MelFilterbank::new(cfg)?;
    let mag = stft(&w.to_f64(), &cfg.stft_params()).magnitude();
    let frames = mag.frames;
    let mut values = vec![0.0f32; cfg.n_mels * frames];
    let mut column = vec![0.0; mag.bins];
    for t in 0..frames {
        for (k, c) in column.iter_mut().enumerate() {
            *c = mag.data[k * frames + t];
        }
        for (m, e) in bank.apply(&column).into_iter().enumerate() {
            values[m * frames + t] = e.max(MEL_FLOOR).ln() as f32;
        }
    }
    MelSpectrogram::new(cfg.n_mels, frames, values)
}

/// Standardizes all entries jointly to mean 0 and variance 1.
pub fn normalize_utterance(m: &MelSpectrogram) -> Result<MelSpectrogram> {
    if m.normalized {
        return Err(Error::InvalidInput("mel spectrogram is already normalized".into()));
    }
    if m.frames < 2 {
        return Err(Error::InvalidInput(format!(
            "utterance normalization needs at least 2 frames, got {}",
            m.frames
        )));
    }
    let (mean, var) = m.moments();
    let std = var.sqrt();
    if !(std > 1e-8) || !std.is_finite() {
        return Err(Error::DegenerateStatistics(format!(
            "mel matrix has standard deviation {std:e}; cannot scale to unit variance"
        )));
    }
    Ok(standardize(m, mean, std))
}

pub(crate) fn standardize(m: &MelSpectrogram, mean: f64, std: f64) -> MelSpectrogram {
    MelSpectrogram {
        values: m.values.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect(),
        mean: mean as f32,
        std: std as f32,
        normalized: true,
        ..m.clone()
    }
}

/// Inverse of [`normalize_utterance`] using the stored statistics.
pub fn denormalize(m: &MelSpectrogram) -> MelSpectrogram {
    if !m.normalized {
        return m.clone();
    }
    let (mean, std) = (m.mean as f64, m.std as f64);
    MelSpectrogram {
        values: m.values.iter().map(|&v| (v as f64 * std + mean) as f32).collect(),
        mean: 0.0,
        std: 1.0,
        normalized: false,
        ..m.clone()
    }
}

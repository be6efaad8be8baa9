//! Audio preprocessing and feature extraction.
//!
//! The pipeline is: downmix, resample to 24 kHz, 50 Hz high-pass and
//! loudness normalization (in the configured order), then log-mel
//! extraction and utterance-wise standardization.

pub mod features;
pub mod filter;
pub mod loudness;
pub mod mel;
pub mod resample;
pub mod stft;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::dataset::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use features::write_features;
use filter::highpass;
use loudness::normalize_loudness;
use mel::{mel_spectrogram, normalize_utterance, MelConfig, MelSpectrogram};
use resample::resample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessingOrder {
    #[default]
    HighpassThenLoudness,
    LoudnessThenHighpass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub sample_rate: u32,
    pub target_lufs: f64,
    pub highpass_hz: f64,
    #[serde(default)]
    pub order: ProcessingOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            target_lufs: -23.0,
            highpass_hz: 50.0,
            order: ProcessingOrder::HighpassThenLoudness,
        }
    }
}

/// Conditioned waveform plus its normalized features.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub waveform: Waveform,
    pub mel: MelSpectrogram,
    pub gain_db: f64,
    pub peak_limited: bool,
}

/// Resample, high-pass and loudness-normalize.
pub fn condition_waveform(w: &Waveform, cfg: &PreprocessConfig) -> Result<(Waveform, f64, bool)> {
    let w = resample(w, cfg.sample_rate)?;
    let (w, gain, limited) = match cfg.order {
        ProcessingOrder::HighpassThenLoudness => {
            let n = normalize_loudness(&highpass(&w, cfg.highpass_hz)?, cfg.target_lufs)?;
            (n.waveform, n.gain_db, n.peak_limited)
        }
        ProcessingOrder::LoudnessThenHighpass => {
            let n = normalize_loudness(&w, cfg.target_lufs)?;
            (highpass(&n.waveform, cfg.highpass_hz)?, n.gain_db, n.peak_limited)
        }
    };
    Ok((w, gain, limited))
}

pub fn preprocess_waveform(w: &Waveform, cfg: &PreprocessConfig, mel_cfg: &MelConfig) -> Result<Preprocessed> {
    if mel_cfg.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "mel sample rate {} differs from preprocessing rate {}",
            mel_cfg.sample_rate, cfg.sample_rate
        )));
    }
    let (waveform, gain_db, peak_limited) = condition_waveform(w, cfg)?;
    let mel = normalize_utterance(&mel_spectrogram(&waveform, mel_cfg)?)?;
    Ok(Preprocessed {
        waveform,
        mel,
        gain_db,
        peak_limited,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocessReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Inputs that could not be processed, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Processes every `.wav` directly inside `in_dir` into `out_dir/wavs`
/// (32-bit float), `out_dir/features` and `out_dir/manifest.tsv`.
pub fn preprocess_dir(
    in_dir: &Path,
    out_dir: &Path,
    cfg: &PreprocessConfig,
    mel_cfg: &MelConfig,
) -> Result<PreprocessReport> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(in_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::InvalidInput(format!("no .wav files in {}", in_dir.display())));
    }
    let (wav_dir, feat_dir) = (out_dir.join("wavs"), out_dir.join("features"));
    fs::create_dir_all(&wav_dir)?;
    fs::create_dir_all(&feat_dir)?;

    let results: Vec<(PathBuf, Result<ManifestEntry>)> = inputs
        .par_iter()
        .map(|path| {
            let run = || -> Result<ManifestEntry> {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let p = preprocess_waveform(&Waveform::read_wav(path)?, cfg, mel_cfg)?;
                let wave = wav_dir.join(format!("{stem}.wav"));
                let features = feat_dir.join(format!("{stem}.umel"));
                p.waveform.write_wav_f32(&wave)?;
                write_features(&features, &p.mel)?;
                Ok(ManifestEntry {
                    wave,
                    features,
                    frames: p.mel.frames,
                    split: None,
                })
            };
            (path.clone(), run())
        })
        .collect();

    let mut report = PreprocessReport {
        manifest_path: out_dir.join("manifest.tsv"),
        ..Default::default()
    };
    for (path, r) in results {
        match r {
            Ok(entry) => report.manifest.entries.push(entry),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push((path, e.to_string()));
            }
        }
    }
    report.manifest.write(&report.manifest_path)?;
    Ok(report)
}

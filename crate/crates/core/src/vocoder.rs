//! Inference, copy synthesis, real-time-factor benchmarking and the
//! high-band spectral diagnostic.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use unimelgan_tensor::{Tape, Tensor};

use crate::audio::Waveform;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::frontend::features::read_features;
use crate::frontend::filter::highpass;
use crate::frontend::mel::{mel_spectrogram, normalize_utterance, standardize, MelSpectrogram};
use crate::frontend::resample::resample;
use crate::frontend::stft::{stft_magnitude, StftParams};
use crate::frontend::{condition_waveform, preprocess_waveform};
use crate::generator::Generator;
use crate::objectives::LOG_FLOOR;
use crate::trainer::Checkpoint;

/// A generator with the configuration it was trained under.
#[derive(Clone, Debug)]
pub struct Vocoder {
    pub config: Config,
    pub generator: Generator,
}

impl Vocoder {
    /// Loads only what inference needs from a training checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config.clone();
        let mut generator = Generator::build(config.generator.clone(), config.train.seed)?;
        let ids: Vec<_> = generator.params().ids().collect();
        for id in ids {
            let name = format!("generator/{}", generator.params().name(id));
            let t = ckpt.array(&name).ok_or_else(|| Error::MissingArray(name.clone()))?;
            let expected = generator.params().get(id).shape().to_vec();
            if t.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            *generator.params_mut().get_mut(id) = t.clone();
        }
        Ok(Self { config, generator })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `hop * T` samples from normalized features whose header matches the
    /// checkpoint's mel settings.
    pub fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        if mel.n_mels != self.config.mel.n_mels {
            return Err(Error::Config(format!(
                "feature header n_mels = {} does not match checkpoint mel.n_mels = {}",
                mel.n_mels, self.config.mel.n_mels
            )));
        }
        self.generator.generate(mel)
    }

    /// Vocodes a feature file into 16-bit PCM; returns the waveform and the
    /// number of clamped samples.
    pub fn vocode_file(&self, features: &Path, out: &Path) -> Result<(Waveform, usize)> {
        let w = self.vocode(&read_features(features)?)?;
        let clamped = w.write_wav_i16(out)?;
        log::info!("wrote {} samples to {} ({clamped} clamped)", w.len(), out.display());
        Ok((w, clamped))
    }

    /// Full preprocessing followed by [`Vocoder::vocode`].
    ///
    /// Silent input has no measurable loudness and a constant mel matrix, so
    /// loudness normalization is skipped and the features are only
    /// mean-centred.
    pub fn copy_synthesis(&self, input: &Waveform) -> Result<Waveform> {
        let (pre, mel_cfg) = (&self.config.preprocess, &self.config.mel);
        let mel = match preprocess_waveform(input, pre, mel_cfg) {
            Ok(p) => p.mel,
            Err(Error::NoMeasurableLoudness | Error::DegenerateStatistics(_)) => {
                log::warn!("copy synthesis on near-silent input: loudness normalization skipped");
                let w = match condition_waveform(input, pre) {
                    Ok((w, _, _)) => w,
                    Err(Error::NoMeasurableLoudness) => highpass(&resample(input, pre.sample_rate)?, pre.highpass_hz)?,
                    Err(e) => return Err(e),
                };
                let raw = mel_spectrogram(&w, mel_cfg)?;
                match normalize_utterance(&raw) {
                    Ok(m) => m,
                    Err(Error::DegenerateStatistics(_)) => {
                        let (mean, _) = raw.moments();
                        standardize(&raw, mean, 1.0)
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        self.vocode(&mel)
    }
}

/// Real-time-factor measurement of the mel-to-waveform forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_seconds: f64,
    /// Median over the timed runs.
    pub wall_seconds: f64,
    pub rtf: f64,
    pub warmup_runs: usize,
    pub runs: usize,
    pub frames: usize,
    pub run_seconds: Vec<f64>,
    pub device: String,
}

pub fn device_description() -> String {
    format!(
        "cpu ({} {}, {} rayon threads, f32, no hardware-specific kernels)",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

/// Times `runs` forward passes over `duration_seconds` of random normalized
/// features after `warmup_runs` untimed passes. Feature synthesis and tensor
/// setup happen outside the timed region.
pub fn benchmark_rtf(generator: &Generator, duration_seconds: f64, runs: usize, warmup_runs: usize) -> Result<RtfReport> {
    if runs < 3 || warmup_runs < 1 {
        return Err(Error::InvalidInput(format!(
            "benchmark needs at least 3 runs and 1 warmup run, got {runs} and {warmup_runs}"
        )));
    }
    if !(duration_seconds > 0.0) {
        return Err(Error::InvalidInput(format!("benchmark duration must be positive, got {duration_seconds}")));
    }
    let cfg = generator.config();
    let sample_rate = crate::audio::SAMPLE_RATE as f64;
    let frames = ((duration_seconds * sample_rate / cfg.hop_size as f64).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::from_fn(vec![1, cfg.input_channels, frames], |_| StandardNormal.sample(&mut rng));
    let once = || -> Result<f64> {
        let tape = Tape::inference();
        let x = tape.constant(input.clone());
        let start = Instant::now();
        let y = generator.forward(&tape, &x)?;
        let elapsed = start.elapsed().as_secs_f64();
        debug_assert_eq!(y.value().numel(), frames * cfg.hop_size);
        Ok(elapsed)
    };
    for _ in 0..warmup_runs {
        once()?;
    }
    let run_seconds = (0..runs).map(|_| once()).collect::<Result<Vec<f64>>>()?;
    let mut sorted = run_seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let wall_seconds = if runs % 2 == 1 {
        sorted[runs / 2]
    } else {
        0.5 * (sorted[runs / 2 - 1] + sorted[runs / 2])
    };
    let audio_seconds = (frames * cfg.hop_size) as f64 / sample_rate;
    Ok(RtfReport {
        audio_seconds,
        wall_seconds,
        rtf: wall_seconds / audio_seconds,
        warmup_runs,
        runs,
        frames,
        run_seconds,
        device: device_description(),
    })
}

/// Log-magnitude distance and energy ratio over a frequency band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighBandReport {
    pub band_hz: [f64; 2],
    pub log_magnitude_distance: f64,
    /// Generated over reference band energy.
    pub band_energy_ratio: f64,
    pub reference_band_energy: f64,
    pub generated_band_energy: f64,
    pub frames: usize,
    pub bins: usize,
}

pub const HIGH_BAND_HZ: [f64; 2] = [6_000.0, 12_000.0];

/// Compares `[6, 12] kHz` of two signals after truncating both to the
/// shorter length. Signals are compared as given.
pub fn highband_distance(reference: &Waveform, generated: &Waveform) -> Result<HighBandReport> {
    if reference.sample_rate != generated.sample_rate {
        return Err(Error::SampleRateMismatch {
            reference: reference.sample_rate,
            generated: generated.sample_rate,
        });
    }
    let len = reference.len().min(generated.len());
    if len == 0 {
        return Err(Error::InvalidInput("high-band comparison of an empty waveform".into()));
    }
    let cut = |w: &Waveform| Waveform::new(w.samples[..len].to_vec(), w.sample_rate);
    let p = StftParams::new(1024, 256, 1024);
    let (r, g) = (stft_magnitude(&cut(reference), &p)?, stft_magnitude(&cut(generated), &p)?);
    let bin_hz = reference.sample_rate as f64 / p.fft_size as f64;
    let band: Vec<usize> = (0..p.bins())
        .filter(|&k| {
            let f = k as f64 * bin_hz;
            f >= HIGH_BAND_HZ[0] && f <= HIGH_BAND_HZ[1]
        })
        .collect();
    if band.is_empty() {
        return Err(Error::InvalidInput(format!(
            "sample rate {} Hz has no bins in the comparison band",
            reference.sample_rate
        )));
    }
    let (mut dist, mut er, mut eg) = (0.0, 0.0, 0.0);
    for &k in &band {
        for t in 0..r.frames {
            let (a, b) = (r.at(k, t), g.at(k, t));
            dist += (b.max(LOG_FLOOR).ln() - a.max(LOG_FLOOR).ln()).abs();
            er += a * a;
            eg += b * b;
        }
    }
    let band_energy_ratio = if er > 0.0 {
        eg / er
    } else if eg == 0.0 {
        1.0
    } else {
        return Err(Error::DivisionByZero("reference has no energy in the comparison band".into()));
    };
    Ok(HighBandReport {
        band_hz: HIGH_BAND_HZ,
        log_magnitude_distance: dist / (band.len() * r.frames) as f64,
        band_energy_ratio,
        reference_band_energy: er,
        generated_band_energy: eg,
        frames: r.frames,
        bins: band.len(),
    })
}

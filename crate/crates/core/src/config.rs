//! The aggregate TOML configuration shared by every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminators::{SpecDiscConfig, WaveDiscConfig};
use crate::error::{Error, Result};
use crate::frontend::mel::MelConfig;
use crate::frontend::stft::StftParamSet;
use crate::frontend::PreprocessConfig;
use crate::generator::GeneratorConfig;
use crate::objectives::DEFAULT_LAMBDA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Mel frames per training segment; the waveform crop is `hop` times longer.
    pub segment_frames: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Generator-only steps before joint adversarial training.
    pub pretrain_steps: u64,
    pub total_steps: u64,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Halve both learning rates every this many steps; constant when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_halving_interval: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            segment_frames: 32,
            lr_g: 1e-4,
            lr_d: 5e-5,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            pretrain_steps: 1000,
            total_steps: 700_000,
            lambda: DEFAULT_LAMBDA,
            seed: 1234,
            checkpoint_interval: 10_000,
            lr_halving_interval: None,
        }
    }
}

impl TrainConfig {
    /// `(lr_g, lr_d)` in effect for the update that produces step `step + 1`.
    pub fn learning_rates(&self, step: u64) -> (f64, f64) {
        let factor = match self.lr_halving_interval {
            Some(n) if n > 0 => 0.5f64.powi((step / n).min(1_000) as i32),
            _ => 1.0,
        };
        (self.lr_g * factor, self.lr_d * factor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid train config: {m}")));
        if self.batch_size == 0 || self.segment_frames == 0 {
            return bad("batch_size and segment_frames must be positive");
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.total_steps < self.pretrain_steps {
            return bad("total_steps must be at least pretrain_steps");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub mel: MelConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub wave_disc: WaveDiscConfig,
    #[serde(default)]
    pub spec_disc: SpecDiscConfig,
    /// Resolutions shared by the auxiliary loss and the spectrogram discriminators.
    #[serde(default)]
    pub stft: StftParamSet,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml_string()?.as_bytes()).into())
    }

    pub fn segment_samples(&self) -> usize {
        self.train.segment_frames * self.mel.hop
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.mel.validate()?;
        self.generator.validate()?;
        self.wave_disc.validate()?;
        self.spec_disc.validate()?;
        self.stft.validate()?;
        if self.generator.hop_size != self.mel.hop {
            return Err(Error::Config(format!(
                "generator upsampling {} must equal the mel hop {}",
                self.generator.hop_size, self.mel.hop
            )));
        }
        if self.generator.input_channels != self.mel.n_mels {
            return Err(Error::Config(format!(
                "generator input_channels {} must equal n_mels {}",
                self.generator.input_channels, self.mel.n_mels
            )));
        }
        if self.preprocess.sample_rate != self.mel.sample_rate {
            return Err(Error::Config(format!(
                "preprocess sample_rate {} must equal mel sample_rate {}",
                self.preprocess.sample_rate, self.mel.sample_rate
            )));
        }
        let seg = self.segment_samples();
        let minimum = self.wave_disc.min_length();
        if seg < minimum {
            return Err(Error::Config(format!(
                "segment of {seg} samples is shorter than the waveform discriminators' minimum {minimum}"
            )));
        }
        if self.spec_disc.enabled {
            for p in self.stft.iter() {
                if self.spec_disc.shape_trace(p.bins(), p.frames(seg)).is_none() {
                    return Err(Error::Config(format!(
                        "segment of {seg} samples is too short for the spectrogram discriminator at {p:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

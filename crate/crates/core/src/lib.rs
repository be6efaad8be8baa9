//! Universal MelGAN: a log-mel to 24 kHz waveform GAN vocoder with
//! multi-resolution spectrogram discriminators.

pub mod audio;
pub mod config;
pub mod dataset;
pub mod discriminators;
pub mod error;
pub mod frontend;
pub mod generator;
mod layers;
pub mod objectives;
pub mod trainer;
pub mod vocoder;

pub use audio::{Waveform, SAMPLE_RATE};
pub use config::Config;
pub use error::{Error, Result};

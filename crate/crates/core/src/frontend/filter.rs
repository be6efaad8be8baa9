//! Second-order IIR sections and the 50 Hz high-pass.

use std::f64::consts::PI;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Normalized biquad `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Butterworth (Q = 1/sqrt 2) high-pass via the bilinear transform with
    /// frequency prewarping, so the response is exactly -3.01 dB at `cutoff`.
    pub fn butterworth_highpass(cutoff: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        Self {
            b0: (1.0 + cos) / 2.0 / a0,
            b1: -(1.0 + cos) / a0,
            b2: (1.0 + cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Runs the section causally from rest (transposed direct form II).
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + s1;
                s1 = self.b1 * v - self.a1 * y + s2;
                s2 = self.b2 * v - self.a2 * y;
                y
            })
            .collect()
    }
}

/// Causal 2nd-order Butterworth high-pass at `cutoff_hz`.
pub fn highpass(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidInput("cannot filter an empty waveform".into()));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < w.sample_rate as f64 / 2.0) {
        return Err(Error::InvalidInput(format!(
            "high-pass cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            w.sample_rate / 2
        )));
    }
    let section = Biquad::butterworth_highpass(cutoff_hz, w.sample_rate as f64);
    let y = section.process(&w.to_f64());
    Ok(Waveform::new(y.into_iter().map(|v| v as f32).collect(), w.sample_rate))
}

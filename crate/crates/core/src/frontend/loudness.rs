//! Integrated loudness (ITU-R BS.1770-4, mono) and gain normalization.

use std::f64::consts::PI;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::frontend::filter::Biquad;

const BLOCK_SECONDS: f64 = 0.4;
const STEP_SECONDS: f64 = 0.1;
const ABSOLUTE_GATE: f64 = -70.0;
const RELATIVE_GATE: f64 = -10.0;
const LOUDNESS_OFFSET: f64 = -0.691;

/// The two K-weighting stages (high shelf then high-pass) designed for
/// `sample_rate` from the analog prototype parameters.
pub fn k_weighting(sample_rate: f64) -> [Biquad; 2] {
    let shelf = {
        let gain_db = 3.999_843_853_973_347;
        let q = 0.707_175_236_955_419_6;
        let fc = 1_681.974_450_955_533;
        let k = (PI * fc / sample_rate).tan();
        let vh = 10f64.powf(gain_db / 20.0);
        let vb = vh.powf(0.499_666_774_154_541_6);
        let a0 = 1.0 + k / q + k * k;
        Biquad {
            b0: (vh + vb * k / q + k * k) / a0,
            b1: 2.0 * (k * k - vh) / a0,
            b2: (vh - vb * k / q + k * k) / a0,
            a1: 2.0 * (k * k - 1.0) / a0,
            a2: (1.0 - k / q + k * k) / a0,
        }
    };
    let highpass = {
        let q = 0.500_327_037_323_877_3;
        let fc = 38.135_470_876_024_44;
        let k = (PI * fc / sample_rate).tan();
        let a0 = 1.0 + k / q + k * k;
        Biquad {
            b0: 1.0,
            b1: -2.0,
            b2: 1.0,
            a1: 2.0 * (k * k - 1.0) / a0,
            a2: (1.0 - k / q + k * k) / a0,
        }
    };
    [shelf, highpass]
}

fn block_loudness(mean_square: f64) -> f64 {
    LOUDNESS_OFFSET + 10.0 * mean_square.log10()
}

/// Gated integrated loudness in LUFS.
pub fn measure_loudness(w: &Waveform) -> Result<f64> {
    let rate = w.sample_rate as f64;
    let block = (BLOCK_SECONDS * rate).round() as usize;
    let step = (STEP_SECONDS * rate).round() as usize;
    if w.len() < block {
        return Err(Error::InvalidInput(format!(
            "loudness needs at least one 400 ms block ({block} samples), got {}",
            w.len()
        )));
    }
    let [shelf, hp] = k_weighting(rate);
    let weighted = hp.process(&shelf.process(&w.to_f64()));
    let squares: Vec<f64> = weighted.iter().map(|v| v * v).collect();
    let blocks: Vec<f64> = (0..=(squares.len() - block) / step)
        .map(|b| squares[b * step..b * step + block].iter().sum::<f64>() / block as f64)
        .collect();
    let above_absolute: Vec<f64> = blocks
        .iter()
        .copied()
        .filter(|&z| z > 0.0 && block_loudness(z) > ABSOLUTE_GATE)
        .collect();
    if above_absolute.is_empty() {
        return Err(Error::NoMeasurableLoudness);
    }
    let relative = block_loudness(above_absolute.iter().sum::<f64>() / above_absolute.len() as f64)
        + RELATIVE_GATE;
    let gated: Vec<f64> = above_absolute
        .into_iter()
        .filter(|&z| block_loudness(z) > relative)
        .collect();
    Ok(block_loudness(gated.iter().sum::<f64>() / gated.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoudnessNormalized {
    pub waveform: Waveform,
    /// Gain actually applied.
    pub gain_db: f64,
    /// Set when the requested gain would have pushed the peak above 1.0 and
    /// the gain was reduced to keep the peak at exactly 1.0.
    pub peak_limited: bool,
}

/// Pure gain to reach `target_lufs`, limited so the peak stays within 1.0.
pub fn normalize_loudness(w: &Waveform, target_lufs: f64) -> Result<LoudnessNormalized> {
    let current = measure_loudness(w)?;
    let wanted = 10f64.powf((target_lufs - current) / 20.0);
    let peak = w.peak() as f64;
    let (gain, peak_limited) = if peak * wanted > 1.0 {
        (1.0 / peak, true)
    } else {
        (wanted, false)
    };
    if peak_limited {
        log::warn!(
            "loudness gain of {:.2} dB would clip (peak {peak:.4}); limited to {:.2} dB",
            20.0 * wanted.log10(),
            20.0 * gain.log10()
        );
    }
    let samples = w
        .samples
        .iter()
        .map(|&s| ((s as f64) * gain).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(LoudnessNormalized {
        waveform: Waveform::new(samples, w.sample_rate),
        gain_db: 20.0 * gain.log10(),
        peak_limited,
    })
}

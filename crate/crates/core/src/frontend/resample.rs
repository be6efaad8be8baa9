//! Band-limited rational resampling with a Kaiser-windowed sinc kernel.

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc on each side of the kernel centre.
const ZERO_CROSSINGS: f64 = 32.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
const KAISER_BETA: f64 = 8.6;
/// Largest phase count for which the polyphase table is precomputed.
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

struct Kernel {
    cutoff: f64,
    half_width: f64,
    norm: f64,
}

impl Kernel {
    fn new(cutoff: f64) -> Self {
        Self {
            cutoff,
            half_width: ZERO_CROSSINGS / (2.0 * cutoff),
            norm: bessel_i0(KAISER_BETA),
        }
    }

    /// Impulse response at `t` input samples from the centre.
    fn at(&self, t: f64) -> f64 {
        let r = t / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let x = 2.0 * self.cutoff * t;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.norm;
        2.0 * self.cutoff * sinc * window
    }
}

/// Taps for fractional offset `frac` (in input samples, `0 <= frac < 1`),
/// normalized to unit DC gain. Tap `j` multiplies input sample `base + j - reach`.
fn phase_taps(kernel: &Kernel, reach: usize, frac: f64) -> Vec<f64> {
    let mut taps: Vec<f64> = (0..2 * reach + 1)
        .map(|j| kernel.at(frac - (j as f64 - reach as f64)))
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Converts `w` to `target_rate`. Output length is `ceil(len * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidInput("cannot resample an empty waveform".into()));
    }
    if target_rate == 0 || w.sample_rate == 0 {
        return Err(Error::InvalidInput("sample rates must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = w.sample_rate as u64 / g;
    let out_len = ((w.len() as u64 * up).div_ceil(down)) as usize;
    let kernel = Kernel::new(0.5 * ROLLOFF * (up as f64 / down as f64).min(1.0));
    let reach = kernel.half_width.ceil() as usize + 1;
    let table: Option<Vec<Vec<f64>>> = (up as usize <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|r| phase_taps(&kernel, reach, r as f64 / up as f64))
            .collect()
    });
    let x = &w.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as isize;
        let phase = (pos % up) as usize;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase],
            None => {
                computed = phase_taps(&kernel, reach, phase as f64 / up as f64);
                &computed
            }
        };
        let mut acc = 0.0f64;
        for (j, tap) in taps.iter().enumerate() {
            let i = base + j as isize - reach as isize;
            if i >= 0 && (i as usize) < x.len() {
                acc += tap * x[i as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Ok(Waveform::new(out, target_rate))
}

//! Short-time Fourier transform magnitudes and their adjoint.
//!
//! Frames are centred: the signal is mirror-padded by `fft_size / 2` on both
//! sides, so a signal of `n` samples yields `n / hop + 1` frames. Matrices
//! are stored bins-major, `data[bin * frames + frame]`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use unimelgan_tensor::reflect_index;

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

/// One `(fft_size, hop, window_length)` analysis setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    pub window_length: usize,
    #[serde(default)]
    pub window: Window,
}

impl StftParams {
    pub const fn new(fft_size: usize, hop: usize, window_length: usize) -> Self {
        Self {
            fft_size,
            hop,
            window_length,
            window: Window::Hann,
        }
    }

    pub fn with_window(self, window: Window) -> Self {
        Self { window, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.hop > 0
            && self.window_length > 0
            && self.fft_size % 2 == 0
            && self.window_length <= self.fft_size
            && self.hop <= self.window_length;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid STFT parameters {self:?}: need 0 < hop <= window_length <= fft_size, fft_size even"
            )))
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Analysis window zero-padded and centred to `fft_size` taps.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.window_length) / 2;
        for n in 0..self.window_length {
            w[offset + n] = match self.window {
                Window::Hann => 0.5 - 0.5 * (2.0 * PI * n as f64 / self.window_length as f64).cos(),
                Window::Rectangular => 1.0,
            };
        }
        w
    }
}

/// The multi-resolution family shared by the auxiliary loss and the
/// spectrogram discriminators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StftParamSet(pub Vec<StftParams>);

impl Default for StftParamSet {
    fn default() -> Self {
        Self(vec![
            StftParams::new(1024, 120, 600),
            StftParams::new(2048, 240, 1200),
            StftParams::new(512, 50, 240),
        ])
    }
}

impl StftParamSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StftParams> {
        self.0.iter()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("at least one STFT parameter set is required".into()));
        }
        self.0.iter().try_for_each(StftParams::validate)
    }
}

/// Complex one-sided spectrum, bins-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

/// Non-negative magnitude matrix, bins-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnitude {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl Magnitude {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_fft(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

/// Complex STFT of `x` (length >= 1).
pub fn stft(x: &[f64], p: &StftParams) -> Spectrum {
    assert!(!x.is_empty(), "stft of an empty signal");
    let n = p.fft_size;
    let (bins, frames) = (p.bins(), p.frames(x.len()));
    let pad = n / 2;
    let window = p.window();
    let fft = forward_fft(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    for t in 0..frames {
        let start = (t * p.hop) as isize - pad as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[reflect_index(start + i as isize, x.len())] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            data[k * frames + t] = buf[k];
        }
    }
    Spectrum { bins, frames, data }
}

impl Spectrum {
    pub fn magnitude(&self) -> Magnitude {
        Magnitude {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }
}

/// `|STFT(w)|` with the given parameters.
pub fn stft_magnitude(w: &Waveform, p: &StftParams) -> Result<Magnitude> {
    if w.is_empty() {
        return Err(Error::InvalidInput("STFT of an empty waveform".into()));
    }
    p.validate()?;
    Ok(stft(&w.to_f64(), p).magnitude())
}

/// Pulls a gradient on `|STFT(x)|` back to `x` (length `len`).
///
/// Uses `d|X|/dy[n] = Re(conj(X) e^{-i 2 pi k n / N}) / |X|`; bins with zero
/// magnitude contribute nothing.
pub fn magnitude_backward(len: usize, p: &StftParams, spectrum: &Spectrum, grad: &[f64]) -> Vec<f64> {
    let n = p.fft_size;
    let (bins, frames) = (spectrum.bins, spectrum.frames);
    assert_eq!(grad.len(), bins * frames);
    let pad = n / 2;
    let window = p.window();
    let fft = forward_fft(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut gx = vec![0.0; len];
    for t in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for k in 0..bins {
            let x = spectrum.data[k * frames + t];
            let mag = x.norm();
            if mag > 0.0 {
                buf[k] = x.conj() * (grad[k * frames + t] / mag);
            }
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let start = (t * p.hop) as isize - pad as isize;
        for (i, b) in buf.iter().enumerate() {
            if window[i] != 0.0 {
                gx[reflect_index(start + i as isize, len)] += window[i] * b.re;
            }
        }
    }
    gx
}

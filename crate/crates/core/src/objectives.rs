//! Spectral auxiliary losses and the least-squares adversarial objectives.
//!
//! Spectral terms are evaluated in `f64`. On a tape, each STFT magnitude is
//! one node whose value feeds both the auxiliary loss and the matching
//! spectrogram discriminator; its backward pass is analytic.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use unimelgan_tensor::{CustomOp, Tape, Tensor, Var};

use crate::audio::Waveform;
use crate::discriminators::ScoreMap;
use crate::error::{Error, Result};
use crate::frontend::stft::{magnitude_backward, stft, Magnitude, Spectrum, StftParamSet, StftParams};

/// Floor applied to magnitudes before the log in the log-magnitude loss.
pub const LOG_FLOOR: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 2.5;

fn same_length(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("waveform lengths differ: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    Ok(())
}

/// `||R - G||_F / ||R||_F` and its gradient with respect to `G`.
fn sc_with_grad(r: &Magnitude, g: &Magnitude, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let denom = r.frobenius();
    if denom == 0.0 {
        return Err(Error::DivisionByZero(
            "spectral convergence with an all-zero reference magnitude".into(),
        ));
    }
    let num = r
        .data
        .iter()
        .zip(&g.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let grad = if want_grad && num > 0.0 {
        r.data.iter().zip(&g.data).map(|(a, b)| (b - a) / (num * denom)).collect()
    } else {
        vec![0.0; if want_grad { g.data.len() } else { 0 }]
    };
    Ok((num / denom, grad))
}

/// `mean |ln max(R, floor) - ln max(G, floor)|` and its gradient in `G`.
fn log_mag_with_grad(r: &Magnitude, g: &Magnitude, want_grad: bool) -> (f64, Vec<f64>) {
    let n = r.data.len() as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; g.data.len()] } else { Vec::new() };
    for (i, (&a, &b)) in r.data.iter().zip(&g.data).enumerate() {
        let d = a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln();
        total += d.abs();
        if want_grad && b > LOG_FLOOR && d != 0.0 {
            grad[i] = -d.signum() / (n * b);
        }
    }
    (total / n, grad)
}

pub fn spectral_convergence_magnitudes(r: &Magnitude, g: &Magnitude) -> Result<f64> {
    Ok(sc_with_grad(r, g, false)?.0)
}

pub fn log_stft_magnitude_magnitudes(r: &Magnitude, g: &Magnitude) -> f64 {
    log_mag_with_grad(r, g, false).0
}

/// Spectral convergence between reference `x` and generated `xh`.
pub fn spectral_convergence(x: &Waveform, xh: &Waveform, p: &StftParams) -> Result<f64> {
    same_length(x.len(), xh.len())?;
    p.validate()?;
    let r = stft(&x.to_f64(), p).magnitude();
    let g = stft(&xh.to_f64(), p).magnitude();
    spectral_convergence_magnitudes(&r, &g)
}

/// Mean absolute log-magnitude difference.
pub fn log_stft_magnitude(x: &Waveform, xh: &Waveform, p: &StftParams) -> Result<f64> {
    same_length(x.len(), xh.len())?;
    p.validate()?;
    let r = stft(&x.to_f64(), p).magnitude();
    let g = stft(&xh.to_f64(), p).magnitude();
    Ok(log_stft_magnitude_magnitudes(&r, &g))
}

/// Per-resolution terms of the auxiliary loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxBreakdown {
    pub sc: Vec<f64>,
    pub mag: Vec<f64>,
    pub aux: f64,
}

impl AuxBreakdown {
    fn from_terms(sc: Vec<f64>, mag: Vec<f64>) -> Self {
        let m = sc.len() as f64;
        let aux = sc.iter().zip(&mag).map(|(s, g)| s + g).sum::<f64>() / m;
        Self { sc, mag, aux }
    }
}

/// `(1/M) sum_m (sc_m + mag_m)` over the given resolutions.
pub fn multires_stft_loss(x: &Waveform, xh: &Waveform, set: &StftParamSet) -> Result<AuxBreakdown> {
    same_length(x.len(), xh.len())?;
    set.validate()?;
    let (xr, xg) = (x.to_f64(), xh.to_f64());
    let (mut sc, mut mag) = (Vec::new(), Vec::new());
    for p in set.iter() {
        let r = stft(&xr, p).magnitude();
        let g = stft(&xg, p).magnitude();
        sc.push(spectral_convergence_magnitudes(&r, &g)?);
        mag.push(log_stft_magnitude_magnitudes(&r, &g));
    }
    Ok(AuxBreakdown::from_terms(sc, mag))
}

/// Auxiliary loss and its exact gradient with respect to `xh`, in `f64`.
pub fn aux_loss_and_grad(x: &[f64], xh: &[f64], set: &StftParamSet) -> Result<(f64, Vec<f64>)> {
    same_length(x.len(), xh.len())?;
    set.validate()?;
    let m = set.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; xh.len()];
    for p in set.iter() {
        let r = stft(x, p).magnitude();
        let spectrum = stft(xh, p);
        let g = spectrum.magnitude();
        let (sc, dsc) = sc_with_grad(&r, &g, true)?;
        let (lm, dlm) = log_mag_with_grad(&r, &g, true);
        total += sc + lm;
        let dmag: Vec<f64> = dsc.iter().zip(&dlm).map(|(a, b)| (a + b) / m).collect();
        for (o, v) in grad.iter_mut().zip(magnitude_backward(xh.len(), p, &spectrum, &dmag)) {
            *o += v;
        }
    }
    Ok((total / m, grad))
}

struct StftMagnitudeOp {
    params: StftParams,
    len: usize,
    spectra: Vec<Spectrum>,
}

impl CustomOp for StftMagnitudeOp {
    fn name(&self) -> &'static str {
        "stft_magnitude"
    }

    fn backward(&self, _: &[&Tensor], needs: &[bool], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let per = grad.numel() / self.spectra.len();
        let mut out = Vec::with_capacity(self.spectra.len() * self.len);
        for (spectrum, g) in self.spectra.iter().zip(grad.data().chunks(per)) {
            let g: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            out.extend(
                magnitude_backward(self.len, &self.params, spectrum, &g)
                    .into_iter()
                    .map(|v| v as f32),
            );
        }
        vec![Some(Tensor::new(vec![self.spectra.len(), 1, self.len], out))]
    }
}

/// STFT magnitudes of a `(B, 1, L)` batch at every resolution.
pub struct StftFeatures {
    /// `(B, 1, bins, frames)` per resolution; the discriminators' inputs.
    pub vars: Vec<Var>,
    /// The same magnitudes in `f64`, per resolution then batch item.
    pub exact: Vec<Arc<Vec<Magnitude>>>,
}

impl StftFeatures {
    pub fn batch(&self) -> usize {
        self.exact.first().map_or(0, |e| e.len())
    }

    /// The same values cut off from the graph.
    pub fn detached(&self, tape: &Tape) -> Self {
        Self {
            vars: self.vars.iter().map(|v| tape.detach(v)).collect(),
            exact: self.exact.clone(),
        }
    }
}

pub fn stft_features(tape: &Tape, x: &Var, set: &StftParamSet) -> Result<StftFeatures> {
    let s = x.shape();
    if s.len() != 3 || s[1] != 1 || s[2] == 0 {
        return Err(Error::Shape(format!("STFT expects (batch, 1, samples), got {s:?}")));
    }
    set.validate()?;
    let (batch, len) = (s[0], s[2]);
    let rows: Vec<Vec<f64>> = x
        .value()
        .data()
        .chunks(len)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    let (mut vars, mut exact) = (Vec::new(), Vec::new());
    for p in set.iter() {
        let spectra: Vec<Spectrum> = rows.iter().map(|r| stft(r, p)).collect();
        let mags: Vec<Magnitude> = spectra.iter().map(Spectrum::magnitude).collect();
        let (bins, frames) = (p.bins(), p.frames(len));
        let data = mags.iter().flat_map(|m| m.data.iter().map(|&v| v as f32)).collect();
        let value = Tensor::new(vec![batch, 1, bins, frames], data);
        let op = StftMagnitudeOp {
            params: *p,
            len,
            spectra,
        };
        vars.push(tape.custom(&[x], value, Box::new(op)));
        exact.push(Arc::new(mags));
    }
    Ok(StftFeatures { vars, exact })
}

struct AuxLossOp {
    real: Vec<Arc<Vec<Magnitude>>>,
    fake: Vec<Arc<Vec<Magnitude>>>,
}

impl CustomOp for AuxLossOp {
    fn name(&self) -> &'static str {
        "multires_stft_loss"
    }

    fn backward(&self, _: &[&Tensor], needs: &[bool], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let m = self.real.len() as f64;
        let g = grad.item() as f64;
        self.real
            .iter()
            .zip(&self.fake)
            .zip(needs)
            .map(|((real, fake), &need)| {
                if !need {
                    return None;
                }
                let b = real.len() as f64;
                let scale = g / (m * b);
                let mut data = Vec::new();
                for (r, f) in real.iter().zip(fake.iter()) {
                    let (_, dsc) = sc_with_grad(r, f, true).expect("checked in forward");
                    let (_, dlm) = log_mag_with_grad(r, f, true);
                    data.extend(dsc.iter().zip(&dlm).map(|(a, c)| ((a + c) * scale) as f32));
                }
                let (bins, frames) = (fake[0].bins, fake[0].frames);
                Some(Tensor::new(vec![fake.len(), 1, bins, frames], data))
            })
            .collect()
    }
}

/// Auxiliary loss on a tape, per item then averaged over the batch, with
/// the batch-averaged per-resolution terms.
pub fn aux_loss(tape: &Tape, real: &StftFeatures, fake: &StftFeatures) -> Result<(Var, AuxBreakdown)> {
    if real.exact.len() != fake.exact.len() || real.exact.is_empty() {
        return Err(Error::Config(format!(
            "auxiliary loss needs matching resolution counts, got {} and {}",
            real.exact.len(),
            fake.exact.len()
        )));
    }
    if real.batch() != fake.batch() {
        return Err(Error::Shape(format!(
            "real batch {} vs generated batch {}",
            real.batch(),
            fake.batch()
        )));
    }
    let b = real.batch() as f64;
    let (mut sc, mut mag) = (Vec::new(), Vec::new());
    for (r, f) in real.exact.iter().zip(&fake.exact) {
        let (mut s, mut l) = (0.0, 0.0);
        for (ri, fi) in r.iter().zip(f.iter()) {
            s += spectral_convergence_magnitudes(ri, fi)?;
            l += log_stft_magnitude_magnitudes(ri, fi);
        }
        sc.push(s / b);
        mag.push(l / b);
    }
    let breakdown = AuxBreakdown::from_terms(sc, mag);
    let op = AuxLossOp {
        real: real.exact.clone(),
        fake: fake.exact.clone(),
    };
    let inputs: Vec<&Var> = fake.vars.iter().collect();
    let loss = tape.custom(&inputs, Tensor::scalar(breakdown.aux as f32), Box::new(op));
    Ok((loss, breakdown))
}

fn family_size(k: usize, m: usize) -> Result<f64> {
    if k + m == 0 {
        return Err(Error::Config("adversarial loss needs at least one discriminator".into()));
    }
    Ok((k + m) as f64)
}

fn mean_sq_from(t: &Tensor, target: f64) -> f64 {
    t.data().iter().map(|&v| (v as f64 - target).powi(2)).sum::<f64>() / t.numel() as f64
}

/// Generator objective from score maps:
/// `aux + lambda / (K + M) * sum over both families of mean((D - 1)^2)`.
pub fn generator_loss_value(aux: f64, fake_wave: &[ScoreMap], fake_spec: &[ScoreMap], lambda: f64) -> Result<f64> {
    let n = family_size(fake_wave.len(), fake_spec.len())?;
    let sum: f64 = fake_wave
        .iter()
        .chain(fake_spec)
        .map(|s| mean_sq_from(&s.values, 1.0))
        .sum();
    Ok(aux + lambda / n * sum)
}

/// Discriminator objective from score maps:
/// `1 / (K + M) * sum over both families of mean((D(x) - 1)^2) + mean(D(x_hat)^2)`.
pub fn discriminator_loss_value(
    real_wave: &[ScoreMap],
    fake_wave: &[ScoreMap],
    real_spec: &[ScoreMap],
    fake_spec: &[ScoreMap],
) -> Result<f64> {
    check_families(real_wave.len(), fake_wave.len(), real_spec.len(), fake_spec.len())?;
    let n = family_size(real_wave.len(), real_spec.len())?;
    let sum: f64 = real_wave
        .iter()
        .zip(fake_wave)
        .chain(real_spec.iter().zip(fake_spec))
        .map(|(r, f)| mean_sq_from(&r.values, 1.0) + mean_sq_from(&f.values, 0.0))
        .sum();
    Ok(sum / n)
}

/// Waveform-only generator objective: `aux + lambda / K * sum_k mean((D_k - 1)^2)`.
pub fn baseline_generator_loss_value(aux: f64, fake_wave: &[ScoreMap], lambda: f64) -> Result<f64> {
    let n = family_size(fake_wave.len(), 0)?;
    let sum: f64 = fake_wave.iter().map(|s| mean_sq_from(&s.values, 1.0)).sum();
    Ok(aux + lambda / n * sum)
}

/// Waveform-only discriminator objective.
pub fn baseline_discriminator_loss_value(real_wave: &[ScoreMap], fake_wave: &[ScoreMap]) -> Result<f64> {
    check_families(real_wave.len(), fake_wave.len(), 0, 0)?;
    let n = family_size(real_wave.len(), 0)?;
    let sum: f64 = real_wave
        .iter()
        .zip(fake_wave)
        .map(|(r, f)| mean_sq_from(&r.values, 1.0) + mean_sq_from(&f.values, 0.0))
        .sum();
    Ok(sum / n)
}

fn check_families(rw: usize, fw: usize, rs: usize, fs: usize) -> Result<()> {
    if rw != fw || rs != fs {
        return Err(Error::Config(format!(
            "real/generated score families differ: waveform {rw} vs {fw}, spectrogram {rs} vs {fs}"
        )));
    }
    Ok(())
}

/// Adversarial generator terms on a tape.
pub struct GeneratorObjective {
    pub total: Var,
    /// `1/(K+M) * sum_k mean((D_k - 1)^2)`.
    pub adv_wave: f64,
    /// `1/(K+M) * sum_m mean((D_m - 1)^2)`.
    pub adv_spec: f64,
}

pub fn generator_loss(
    tape: &Tape,
    aux: &Var,
    fake_wave: &[Var],
    fake_spec: &[Var],
    lambda: f64,
) -> Result<GeneratorObjective> {
    let n = family_size(fake_wave.len(), fake_spec.len())?;
    let terms: Vec<Var> = fake_wave
        .iter()
        .chain(fake_spec)
        .map(|s| tape.mean_squared_from(s, 1.0))
        .collect();
    let weight = (lambda / n) as f32;
    let mut weighted: Vec<(&Var, f32)> = vec![(aux, 1.0)];
    weighted.extend(terms.iter().map(|t| (t, weight)));
    let total = tape.weighted_sum(&weighted)?;
    let family = |ts: &[Var]| ts.iter().map(|t| t.value().item() as f64).sum::<f64>() / n;
    Ok(GeneratorObjective {
        total,
        adv_wave: family(&terms[..fake_wave.len()]),
        adv_spec: family(&terms[fake_wave.len()..]),
    })
}

/// Waveform-only generator objective on a tape.
pub fn baseline_generator_loss(tape: &Tape, aux: &Var, fake_wave: &[Var], lambda: f64) -> Result<Var> {
    let n = family_size(fake_wave.len(), 0)?;
    let terms: Vec<Var> = fake_wave.iter().map(|s| tape.mean_squared_from(s, 1.0)).collect();
    let weight = (lambda / n) as f32;
    let mut weighted: Vec<(&Var, f32)> = vec![(aux, 1.0)];
    weighted.extend(terms.iter().map(|t| (t, weight)));
    Ok(tape.weighted_sum(&weighted)?)
}

pub fn discriminator_loss(
    tape: &Tape,
    real_wave: &[Var],
    fake_wave: &[Var],
    real_spec: &[Var],
    fake_spec: &[Var],
) -> Result<Var> {
    check_families(real_wave.len(), fake_wave.len(), real_spec.len(), fake_spec.len())?;
    let n = family_size(real_wave.len(), real_spec.len())?;
    let mut terms = Vec::new();
    for (r, f) in real_wave.iter().zip(fake_wave).chain(real_spec.iter().zip(fake_spec)) {
        terms.push(tape.mean_squared_from(r, 1.0));
        terms.push(tape.mean_squared_from(f, 0.0));
    }
    let weight = (1.0 / n) as f32;
    let weighted: Vec<(&Var, f32)> = terms.iter().map(|t| (t, weight)).collect();
    Ok(tape.weighted_sum(&weighted)?)
}

/// Waveform-only discriminator objective on a tape.
pub fn baseline_discriminator_loss(tape: &Tape, real_wave: &[Var], fake_wave: &[Var]) -> Result<Var> {
    check_families(real_wave.len(), fake_wave.len(), 0, 0)?;
    let n = family_size(real_wave.len(), 0)?;
    let mut terms = Vec::new();
    for (r, f) in real_wave.iter().zip(fake_wave) {
        terms.push(tape.mean_squared_from(r, 1.0));
        terms.push(tape.mean_squared_from(f, 0.0));
    }
    let weight = (1.0 / n) as f32;
    let weighted: Vec<(&Var, f32)> = terms.iter().map(|t| (t, weight)).collect();
    Ok(tape.weighted_sum(&weighted)?)
}

/// One training-log record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub phase: String,
    pub lr_g: f64,
    pub lr_d: f64,
    pub sc_per_resolution: Vec<f64>,
    pub mag_per_resolution: Vec<f64>,
    pub aux: f64,
    pub adv_wave: f64,
    pub adv_spec: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.aux, self.adv_wave, self.adv_spec, self.total_g, self.total_d]
            .iter()
            .chain(&self.sc_per_resolution)
            .chain(&self.mag_per_resolution)
            .all(|v| v.is_finite())
    }
}

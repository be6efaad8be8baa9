//! Multi-scale waveform discriminators and multi-resolution spectrogram
//! discriminators. Both are fully convolutional and emit score maps.

use serde::{Deserialize, Serialize};
use unimelgan_tensor::conv::conv_out_len;
use unimelgan_tensor::{Conv1dSpec, Conv2dSpec, ParamStore, Tape, Tensor, Var};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::frontend::stft::{Magnitude, StftParamSet};
use crate::generator::LEAKY_SLOPE;
use crate::layers::{conv2d_layer, conv_layer, Access, ConvParams, Initializer};

/// Which discriminator produced a score map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    Waveform { scale: usize },
    Spectrogram { resolution: usize },
}

/// Per-window discriminator outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub source: ScoreSource,
    pub values: Tensor,
}

impl ScoreMap {
    pub fn constant(source: ScoreSource, shape: Vec<usize>, value: f32) -> Self {
        Self {
            source,
            values: Tensor::full(shape, value),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl WaveLayer {
    const fn new(channels: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
            groups,
        }
    }

    /// Zero padding of every layer but the first, which mirror-pads.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveDiscConfig {
    /// K, the number of scales.
    pub num_scales: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_padding: usize,
    /// Layers after the mono input; the last must have one channel.
    pub layers: Vec<WaveLayer>,
    pub weight_normalization: bool,
    pub init_std: f32,
}

impl Default for WaveDiscConfig {
    fn default() -> Self {
        Self {
            num_scales: 3,
            pool_kernel: 4,
            pool_stride: 2,
            pool_padding: 1,
            layers: vec![
                WaveLayer::new(16, 15, 1, 1),
                WaveLayer::new(64, 41, 4, 4),
                WaveLayer::new(256, 41, 4, 16),
                WaveLayer::new(1024, 41, 4, 64),
                WaveLayer::new(1024, 41, 4, 256),
                WaveLayer::new(1024, 5, 1, 1),
                WaveLayer::new(1, 3, 1, 1),
            ],
            weight_normalization: true,
            init_std: 0.02,
        }
    }
}

impl WaveDiscConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("invalid waveform discriminator config: {m}")));
        if self.num_scales == 0 {
            return bad("num_scales (K) must be at least 1".into());
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 || self.pool_padding >= self.pool_kernel {
            return bad("pooling needs positive kernel and stride and padding below the kernel".into());
        }
        if self.layers.last().map(|l| l.channels) != Some(1) {
            return bad("the last layer must output one channel".into());
        }
        let mut cin = 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 || l.groups == 0 || l.channels == 0 {
                return bad(format!("layer {i} has a zero kernel, stride, groups or channel count"));
            }
            if cin % l.groups != 0 || l.channels % l.groups != 0 {
                return bad(format!(
                    "layer {i}: groups {} must divide {cin} input and {} output channels",
                    l.groups, l.channels
                ));
            }
            cin = l.channels;
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    /// Input length seen by each scale.
    pub fn scale_lengths(&self, len: usize) -> Option<Vec<usize>> {
        let mut out = vec![len];
        for _ in 1..self.num_scales {
            let prev = *out.last().unwrap();
            out.push(conv_out_len(prev, self.pool_kernel, self.pool_stride, self.pool_padding, 1)?);
        }
        Some(out)
    }

    /// Temporal length after each layer for an input of `len` samples.
    pub fn layer_lengths(&self, len: usize) -> Option<Vec<usize>> {
        let mut cur = len;
        self.layers
            .iter()
            .map(|l| {
                cur = conv_out_len(cur, l.kernel, l.stride, l.padding(), 1)?;
                Some(cur)
            })
            .collect()
    }

    /// Shape trace: per scale, the length after every layer.
    pub fn shape_trace(&self, len: usize) -> Option<Vec<Vec<usize>>> {
        self.scale_lengths(len)?
            .into_iter()
            .map(|l| self.layer_lengths(l))
            .collect()
    }

    /// Shortest waveform every scale can score.
    pub fn min_length(&self) -> usize {
        (1..).find(|&l| self.shape_trace(l).is_some()).unwrap()
    }
}

/// K structurally identical waveform discriminators with unshared weights.
#[derive(Clone, Debug)]
pub struct WaveDiscriminators {
    config: WaveDiscConfig,
    params: ParamStore,
    discs: Vec<Vec<ConvParams>>,
}

impl WaveDiscriminators {
    pub fn build(config: WaveDiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(&mut params, seed, config.init_std, config.weight_normalization);
        let discs = (0..config.num_scales)
            .map(|k| {
                let mut cin = 1;
                config
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        let p = init.conv(
                            &format!("scale{k}.layer{j}"),
                            [l.channels, cin / l.groups, l.kernel],
                            l.channels,
                        );
                        cin = l.channels;
                        p
                    })
                    .collect()
            })
            .collect();
        Ok(Self { config, params, discs })
    }

    pub fn config(&self) -> &WaveDiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    /// The input each scale receives: `x` average-pooled `k` times.
    pub fn scale_inputs(&self, tape: &Tape, x: &Var) -> Result<Vec<Var>> {
        let c = &self.config;
        let mut out = vec![x.clone()];
        for _ in 1..c.num_scales {
            let prev = out.last().unwrap();
            out.push(tape.avg_pool1d(prev, c.pool_kernel, c.pool_stride, c.pool_padding)?);
        }
        Ok(out)
    }

    /// Scores for `x: (B, 1, L)`, one `(B, 1, L_k)` map per scale.
    /// `frozen` reads current weights without recording their gradients.
    pub fn forward(&self, tape: &Tape, x: &Var, frozen: bool) -> Result<Vec<Var>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != 1 {
            return Err(Error::Shape(format!("waveform discriminators expect (batch, 1, samples), got {s:?}")));
        }
        let minimum = self.config.min_length();
        if s[2] < minimum {
            return Err(Error::TooShort { len: s[2], minimum });
        }
        let access = Access {
            store: &self.params,
            frozen,
        };
        self.scale_inputs(tape, x)?
            .iter()
            .zip(&self.discs)
            .map(|(input, disc)| {
                let mut h = input.clone();
                let last = disc.len() - 1;
                for (j, (p, l)) in disc.iter().zip(&self.config.layers).enumerate() {
                    let mut spec = Conv1dSpec {
                        stride: l.stride,
                        padding: l.padding(),
                        groups: l.groups,
                        ..Default::default()
                    };
                    if j == 0 {
                        h = tape.reflect_pad1d(&h, spec.padding, spec.padding)?;
                        spec.padding = 0;
                    }
                    h = conv_layer(tape, access, p, &h, spec)?;
                    if j < last {
                        h = tape.leaky_relu(&h, LEAKY_SLOPE);
                    }
                }
                Ok(h)
            })
            .collect()
    }

    pub fn discriminate(&self, w: &Waveform) -> Result<Vec<ScoreMap>> {
        let tape = Tape::inference();
        let x = tape.input(Tensor::new(vec![1, 1, w.len()], w.samples.clone()));
        Ok(self
            .forward(&tape, &x, false)?
            .into_iter()
            .enumerate()
            .map(|(k, v)| ScoreMap {
                source: ScoreSource::Waveform { scale: k },
                values: v.value().clone(),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecDiscConfig {
    /// When false the bank is empty (M = 0, waveform-only ablation); the
    /// auxiliary loss still uses every STFT resolution.
    pub enabled: bool,
    pub channels: usize,
    pub groups: usize,
    pub dilation: usize,
    pub kernel: usize,
    /// Kernel of the last two layers.
    pub tail_kernel: usize,
    /// Layers after the input conv that stride along time.
    pub strided_layers: usize,
    pub time_stride: usize,
    pub freq_stride: usize,
    pub weight_normalization: bool,
    pub init_std: f32,
}

impl Default for SpecDiscConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            channels: 32,
            groups: 1,
            dilation: 1,
            kernel: 9,
            tail_kernel: 3,
            strided_layers: 3,
            time_stride: 2,
            freq_stride: 1,
            weight_normalization: true,
            init_std: 0.02,
        }
    }
}

/// One 2-d layer: output channels, kernel, `(freq, time)` stride, groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecLayer {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: (usize, usize),
    pub groups: usize,
}

impl SpecDiscConfig {
    pub fn layers(&self) -> Vec<SpecLayer> {
        let c = self.channels;
        let mut layers = vec![SpecLayer {
            in_channels: 1,
            channels: c,
            kernel: self.kernel,
            stride: (1, 1),
            groups: 1,
        }];
        for _ in 0..self.strided_layers {
            layers.push(SpecLayer {
                in_channels: c,
                channels: c,
                kernel: self.kernel,
                stride: (self.freq_stride, self.time_stride),
                groups: self.groups,
            });
        }
        layers.push(SpecLayer {
            in_channels: c,
            channels: c,
            kernel: self.tail_kernel,
            stride: (1, 1),
            groups: self.groups,
        });
        layers.push(SpecLayer {
            in_channels: c,
            channels: 1,
            kernel: self.tail_kernel,
            stride: (1, 1),
            groups: 1,
        });
        layers
    }

    pub fn padding(&self, kernel: usize) -> usize {
        self.dilation * (kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid spectrogram discriminator config: {m}")));
        if self.channels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return bad("groups must divide a positive channel count");
        }
        if self.dilation == 0 || self.kernel == 0 || self.tail_kernel == 0 {
            return bad("kernels and dilation must be positive");
        }
        if self.time_stride == 0 || self.freq_stride == 0 {
            return bad("strides must be positive");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// `(freq, time)` extent after every layer for a `bins x frames` input.
    pub fn shape_trace(&self, bins: usize, frames: usize) -> Option<Vec<(usize, usize)>> {
        let (mut h, mut w) = (bins, frames);
        self.layers()
            .iter()
            .map(|l| {
                let p = self.padding(l.kernel);
                h = conv_out_len(h, l.kernel, l.stride.0, p, self.dilation)?;
                w = conv_out_len(w, l.kernel, l.stride.1, p, self.dilation)?;
                Some((h, w))
            })
            .collect()
    }
}

/// M spectrogram discriminators, one per STFT resolution.
#[derive(Clone, Debug)]
pub struct SpecDiscriminators {
    config: SpecDiscConfig,
    resolutions: StftParamSet,
    params: ParamStore,
    discs: Vec<Vec<ConvParams>>,
}

impl SpecDiscriminators {
    pub fn build(resolutions: &StftParamSet, config: SpecDiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        resolutions.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(&mut params, seed, config.init_std, config.weight_normalization);
        let count = if config.enabled { resolutions.len() } else { 0 };
        let layers = config.layers();
        let discs = (0..count)
            .map(|m| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        init.conv_nd(
                            &format!("resolution{m}.layer{j}"),
                            &[l.channels, l.in_channels / l.groups, l.kernel, l.kernel],
                            l.channels,
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            resolutions: resolutions.clone(),
            params,
            discs,
        })
    }

    pub fn config(&self) -> &SpecDiscConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &StftParamSet {
        &self.resolutions
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// M; zero when disabled.
    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    /// Scores for linear magnitudes `(B, 1, bins, frames)`, one per resolution.
    pub fn forward(&self, tape: &Tape, mags: &[Var], frozen: bool) -> Result<Vec<Var>> {
        if self.discs.is_empty() {
            return Ok(Vec::new());
        }
        if mags.len() != self.discs.len() {
            return Err(Error::Config(format!(
                "{} magnitude inputs for {} spectrogram discriminators",
                mags.len(),
                self.discs.len()
            )));
        }
        let access = Access {
            store: &self.params,
            frozen,
        };
        let layers = self.config.layers();
        mags.iter()
            .zip(&self.discs)
            .zip(self.resolutions.iter())
            .map(|((mag, disc), p)| {
                let s = mag.shape();
                if s.len() != 4 || s[1] != 1 || s[2] != p.bins() {
                    return Err(Error::Shape(format!(
                        "resolution {p:?} expects (batch, 1, {}, frames) magnitudes, got {s:?}",
                        p.bins()
                    )));
                }
                let mut h = mag.clone();
                for (j, (w, l)) in disc.iter().zip(&layers).enumerate() {
                    let pad = self.config.padding(l.kernel);
                    let spec = Conv2dSpec {
                        stride: l.stride,
                        padding: (pad, pad),
                        dilation: (self.config.dilation, self.config.dilation),
                        groups: l.groups,
                    };
                    h = conv2d_layer(tape, access, w, &h, spec)?;
                    if j + 1 < layers.len() {
                        h = tape.leaky_relu(&h, LEAKY_SLOPE);
                    }
                }
                Ok(h)
            })
            .collect()
    }

    pub fn discriminate(&self, mags: &[Magnitude]) -> Result<Vec<ScoreMap>> {
        let tape = Tape::inference();
        let vars: Vec<Var> = mags
            .iter()
            .map(|m| {
                let data = m.data.iter().map(|&v| v as f32).collect();
                tape.input(Tensor::new(vec![1, 1, m.bins, m.frames], data))
            })
            .collect();
        Ok(self
            .forward(&tape, &vars, false)?
            .into_iter()
            .enumerate()
            .map(|(m, v)| ScoreMap {
                source: ScoreSource::Spectrogram { resolution: m },
                values: v.value().clone(),
            })
            .collect())
    }
}

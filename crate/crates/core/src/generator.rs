//! The enlarged MelGAN generator with gated activation units.
//!
//! Topology: reflect-padded input conv, then per stage a leaky ReLU, a
//! transposed conv upsampling by `upsample_rates[i]`, a stack of dilated
//! residual blocks and (when enabled) a channel-doubling conv followed by a
//! GAU. A leaky ReLU, output conv and `tanh` close the network.

use serde::{Deserialize, Serialize};
use unimelgan_tensor::{Conv1dSpec, ParamStore, Tape, Tensor, Var};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::frontend::mel::MelSpectrogram;
use crate::layers::{conv_layer, Access, ConvParams, Initializer};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub channel_schedule: Vec<usize>,
    pub upsample_rates: Vec<usize>,
    /// Must equal the mel hop and the product of `upsample_rates`.
    pub hop_size: usize,
    pub residual_dilations: Vec<usize>,
    pub boundary_kernel: usize,
    pub residual_kernel: usize,
    /// Transposed-conv kernel is this factor times the stride.
    pub upsample_kernel_factor: usize,
    pub gau_enabled: bool,
    /// Kernel of the channel-doubling conv feeding each GAU.
    pub gau_kernel: usize,
    pub weight_normalization: bool,
    pub init_std: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 100,
            channel_schedule: vec![2048, 1024, 512, 256],
            upsample_rates: vec![8, 8, 4],
            hop_size: 256,
            residual_dilations: vec![1, 3, 9, 27],
            boundary_kernel: 7,
            residual_kernel: 3,
            upsample_kernel_factor: 2,
            gau_enabled: true,
            gau_kernel: 3,
            weight_normalization: true,
            init_std: 0.02,
        }
    }
}

fn invalid(msg: String) -> Error {
    Error::Config(format!("invalid generator config: {msg}"))
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(invalid("input_channels must be positive".into()));
        }
        if self.upsample_rates.is_empty() {
            return Err(invalid("upsample_rates must not be empty".into()));
        }
        if self.channel_schedule.len() != self.upsample_rates.len() + 1 {
            return Err(invalid(format!(
                "channel_schedule length {} must equal upsample_rates length {} + 1",
                self.channel_schedule.len(),
                self.upsample_rates.len()
            )));
        }
        if self.channel_schedule.contains(&0) || self.upsample_rates.contains(&0) {
            return Err(invalid("channel widths and upsample rates must be positive".into()));
        }
        let product: usize = self.upsample_rates.iter().product();
        if product != self.hop_size {
            return Err(invalid(format!(
                "product(upsample_rates) = {product} must equal the mel hop size {}",
                self.hop_size
            )));
        }
        if self.residual_dilations.contains(&0) {
            return Err(invalid("residual dilations must be positive".into()));
        }
        for (name, k) in [
            ("boundary_kernel", self.boundary_kernel),
            ("residual_kernel", self.residual_kernel),
            ("gau_kernel", self.gau_kernel),
        ] {
            if k % 2 == 0 {
                return Err(invalid(format!("{name} = {k} must be odd for length-preserving padding")));
            }
        }
        if self.upsample_kernel_factor == 0 {
            return Err(invalid("upsample_kernel_factor must be positive".into()));
        }
        for &s in &self.upsample_rates {
            if upsample_padding(s, self.upsample_kernel_factor).1 >= s {
                return Err(invalid(format!(
                    "stride {s} with kernel factor {} cannot give an output of exactly stride x input",
                    self.upsample_kernel_factor
                )));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(invalid("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Exact parameter count.
    ///
    /// With `conv(i, o, k) = o*i*k + o + [wn]*o` and
    /// `tconv(i, o, k) = i*o*k + o + [wn]*i` (the gain is per input slice):
    ///
    /// ```text
    /// conv(n_in, C0, kb)
    ///   + sum_i [ tconv(C_{i-1}, C_i, f*s_i)
    ///             + |dilations| * (conv(C_i, C_i, kr) + conv(C_i, C_i, 1))
    ///             + [gau] * conv(C_i, 2*C_i, kg) ]
    ///   + conv(C_last, 1, kb)
    /// ```
    pub fn parameter_count(&self) -> usize {
        let wn = self.weight_normalization as usize;
        let conv = |i: usize, o: usize, k: usize| o * i * k + o + wn * o;
        let tconv = |i: usize, o: usize, k: usize| i * o * k + o + wn * i;
        let c = &self.channel_schedule;
        let mut total = conv(self.input_channels, c[0], self.boundary_kernel);
        for (i, &s) in self.upsample_rates.iter().enumerate() {
            let ch = c[i + 1];
            total += tconv(c[i], ch, self.upsample_kernel_factor * s);
            total += self.residual_dilations.len() * (conv(ch, ch, self.residual_kernel) + conv(ch, ch, 1));
            if self.gau_enabled {
                total += conv(ch, 2 * ch, self.gau_kernel);
            }
        }
        total + conv(*c.last().unwrap(), 1, self.boundary_kernel)
    }
}

/// `(padding, output_padding)` making a transposed conv with kernel
/// `factor * stride` produce exactly `stride * len` samples.
pub fn upsample_padding(stride: usize, factor: usize) -> (usize, usize) {
    let excess = (factor - 1) * stride;
    let padding = excess.div_ceil(2);
    (padding, 2 * padding - excess)
}

enum Footprint {
    Same(i64),
    Up { stride: i64, kernel: i64, padding: i64 },
}

fn footprints(cfg: &GeneratorConfig) -> Vec<Footprint> {
    let half = |k: usize| ((k - 1) / 2) as i64;
    let mut layers = vec![Footprint::Same(half(cfg.boundary_kernel))];
    for &s in &cfg.upsample_rates {
        layers.push(Footprint::Up {
            stride: s as i64,
            kernel: (cfg.upsample_kernel_factor * s) as i64,
            padding: upsample_padding(s, cfg.upsample_kernel_factor).0 as i64,
        });
        for &d in &cfg.residual_dilations {
            layers.push(Footprint::Same((d * (cfg.residual_kernel - 1) / 2) as i64));
        }
        if cfg.gau_enabled {
            layers.push(Footprint::Same(half(cfg.gau_kernel)));
        }
    }
    layers.push(Footprint::Same(half(cfg.boundary_kernel)));
    layers
}

/// Input frames `[lo, hi]` that can influence output sample `n`, ignoring
/// boundary padding.
pub fn frame_support(cfg: &GeneratorConfig, n: i64) -> (i64, i64) {
    let (mut lo, mut hi) = (n, n);
    for layer in footprints(cfg).iter().rev() {
        match *layer {
            Footprint::Same(h) => {
                lo -= h;
                hi += h;
            }
            Footprint::Up { stride, kernel, padding } => {
                // Input i reaches outputs [i*s - p, i*s - p + K - 1].
                lo = (lo + padding - kernel + 1 + stride - 1).div_euclid(stride);
                hi = (hi + padding).div_euclid(stride);
            }
        }
    }
    (lo, hi)
}

/// Largest number of input frames influencing a single output sample.
pub fn receptive_field(cfg: &GeneratorConfig) -> usize {
    let hop = cfg.upsample_rates.iter().product::<usize>() as i64;
    let base = 1_000 * hop;
    (0..hop)
        .map(|phase| {
            let (lo, hi) = frame_support(cfg, base + phase);
            (hi - lo + 1) as usize
        })
        .max()
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
struct Stage {
    up: ConvParams,
    blocks: Vec<(ConvParams, ConvParams)>,
    gate: Option<ConvParams>,
}

/// A built generator: configuration plus named parameter arrays.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    input: ConvParams,
    stages: Vec<Stage>,
    output: ConvParams,
}

impl Generator {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(&mut params, seed, config.init_std, config.weight_normalization);
        let c = &config.channel_schedule;
        let (kb, kr, kg) = (config.boundary_kernel, config.residual_kernel, config.gau_kernel);
        let input = init.conv("input", [c[0], config.input_channels, kb], c[0]);
        let mut stages = Vec::new();
        for (i, &s) in config.upsample_rates.iter().enumerate() {
            let ch = c[i + 1];
            let up = init.conv(
                &format!("stage{i}.upsample"),
                [c[i], ch, config.upsample_kernel_factor * s],
                ch,
            );
            let blocks = (0..config.residual_dilations.len())
                .map(|j| {
                    (
                        init.conv(&format!("stage{i}.block{j}.dilated"), [ch, ch, kr], ch),
                        init.conv(&format!("stage{i}.block{j}.pointwise"), [ch, ch, 1], ch),
                    )
                })
                .collect();
            let gate = config
                .gau_enabled
                .then(|| init.conv(&format!("stage{i}.gate"), [2 * ch, ch, kg], 2 * ch));
            stages.push(Stage { up, blocks, gate });
        }
        let output = init.conv("output", [1, *c.last().unwrap(), kb], 1);
        Ok(Self {
            config,
            params,
            input,
            stages,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `(B, n_mels, T)` to `(B, 1, hop * T)`.
    pub fn forward(&self, tape: &Tape, mel: &Var) -> Result<Var> {
        self.forward_traced(tape, mel, &mut |_, _| {})
    }

    /// [`Generator::forward`] reporting every intermediate activation.
    pub fn forward_traced(
        &self,
        tape: &Tape,
        mel: &Var,
        hook: &mut dyn FnMut(&str, &Var),
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = mel.shape();
        if s.len() != 3 || s[1] != cfg.input_channels || s[2] == 0 {
            return Err(Error::Shape(format!(
                "generator expects (batch, {}, frames) mel input with at least one frame, got {s:?}",
                cfg.input_channels
            )));
        }
        let p = Access { store: &self.params, frozen: false };
        let same = |k: usize, d: usize| (d * (k - 1) / 2, Conv1dSpec { dilation: d, ..Default::default() });

        let (pad, spec) = same(cfg.boundary_kernel, 1);
        let mut h = conv_layer(tape, p, &self.input, &tape.reflect_pad1d(mel, pad, pad)?, spec)?;
        hook("input", &h);
        for (i, (stage, &stride)) in self.stages.iter().zip(&cfg.upsample_rates).enumerate() {
            let (padding, output_padding) = upsample_padding(stride, cfg.upsample_kernel_factor);
            let x = tape.leaky_relu(&h, LEAKY_SLOPE);
            let w = stage.up.weight(tape, p)?;
            h = tape.conv_transpose1d(&x, &w, Some(&stage.up.bias(tape, p)), stride, padding, output_padding)?;
            hook(&format!("stage{i}.upsample"), &h);
            for (j, ((dilated, pointwise), &d)) in stage.blocks.iter().zip(&cfg.residual_dilations).enumerate() {
                let (pad, spec) = same(cfg.residual_kernel, d);
                let t = tape.reflect_pad1d(&tape.leaky_relu(&h, LEAKY_SLOPE), pad, pad)?;
                let t = conv_layer(tape, p, dilated, &t, spec)?;
                let t = conv_layer(tape, p, pointwise, &tape.leaky_relu(&t, LEAKY_SLOPE), Conv1dSpec::default())?;
                h = tape.add(&h, &t)?;
                hook(&format!("stage{i}.block{j}"), &h);
            }
            if let Some(gate) = &stage.gate {
                let (pad, spec) = same(cfg.gau_kernel, 1);
                let doubled = conv_layer(tape, p, gate, &tape.reflect_pad1d(&h, pad, pad)?, spec)?;
                hook(&format!("stage{i}.gate"), &doubled);
                h = tape.gau(&doubled)?;
                hook(&format!("stage{i}.gau"), &h);
            }
        }
        let (pad, spec) = same(cfg.boundary_kernel, 1);
        let x = tape.reflect_pad1d(&tape.leaky_relu(&h, LEAKY_SLOPE), pad, pad)?;
        let y = tape.tanh(&conv_layer(tape, p, &self.output, &x, spec)?);
        hook("output", &y);
        Ok(y)
    }

    /// Waveform of exactly `hop * T` samples from normalized features.
    pub fn generate(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        if mel.n_mels != self.config.input_channels {
            return Err(Error::Shape(format!(
                "generator expects {} mel bands, got {}",
                self.config.input_channels, mel.n_mels
            )));
        }
        if !mel.normalized {
            return Err(Error::InvalidInput(
                "generator input must be utterance-normalized features".into(),
            ));
        }
        let tape = Tape::inference();
        let x = tape.input(Tensor::new(vec![1, mel.n_mels, mel.frames], mel.values.clone()));
        let y = self.forward(&tape, &x)?;
        Ok(Waveform::new(y.value().data().to_vec(), SAMPLE_RATE))
    }
}

/// Gated activation over a `(2C, L)` or `(B, 2C, L)` map: `tanh(a) * sigmoid(b)`.
pub fn gau(h: &Tensor) -> Result<Tensor> {
    let batched = match h.rank() {
        2 => h.clone().reshape(vec![1, h.dim(0), h.dim(1)]),
        3 => h.clone(),
        r => return Err(Error::InvalidInput(format!("gau expects a rank 2 or 3 map, got rank {r}"))),
    };
    if batched.dim(1) % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "gau needs an even channel count, got {}",
            batched.dim(1)
        )));
    }
    let tape = Tape::inference();
    let out = tape.gau(&tape.input(batched))?.value().clone();
    Ok(if h.rank() == 2 {
        out.reshape(vec![h.dim(0) / 2, h.dim(1)])
    } else {
        out
    })
}

//! Generator pretraining, alternating adversarial training, checkpoints
//! and the training loop.

pub mod checkpoint;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimelgan_tensor::{Adam, ParamStore, Tape, Tensor, Var};

use crate::config::Config;
use crate::dataset::{load_utterances, sample_segment, Manifest, Segment, Utterance};
use crate::discriminators::{SpecDiscriminators, WaveDiscriminators};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::objectives::{
    aux_loss, discriminator_loss, generator_loss, stft_features, AuxBreakdown, LossBreakdown, StftFeatures,
};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// File name of the per-step loss log inside the output directory.
pub const LOSS_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.umck";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.umck")
}

/// Aligned crops stacked into tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(B, n_mels, F)`.
    pub mel: Tensor,
    /// `(B, 1, hop * F)`.
    pub wave: Tensor,
}

impl Batch {
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidInput("a batch needs at least one segment".into()))?;
        let (n_mels, frames, len) = (first.mel.n_mels, first.mel.frames, first.wave.len());
        let mut mel = Vec::with_capacity(segments.len() * n_mels * frames);
        let mut wave = Vec::with_capacity(segments.len() * len);
        for s in segments {
            if (s.mel.n_mels, s.mel.frames, s.wave.len()) != (n_mels, frames, len) {
                return Err(Error::Shape(format!("segment {} differs in shape from {}", s.id, first.id)));
            }
            mel.extend_from_slice(&s.mel.values);
            wave.extend_from_slice(&s.wave);
        }
        let b = segments.len();
        Ok(Self {
            ids: segments.iter().map(|s| format!("{}@{}", s.id, s.start_frame)).collect(),
            mel: Tensor::new(vec![b, n_mels, frames], mel),
            wave: Tensor::new(vec![b, 1, len], wave),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Result of a discriminator-only update.
pub struct DiscriminatorStep {
    pub loss: f64,
    /// Gradients the discriminator loss sends into the generator, in
    /// store order; `None` where there is no dependency.
    pub generator_grads: Vec<Option<Tensor>>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub generator: Generator,
    pub wave_disc: WaveDiscriminators,
    pub spec_disc: SpecDiscriminators,
    pub opt_g: Adam,
    pub opt_wave: Adam,
    pub opt_spec: Adam,
    /// Completed optimization steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

struct GeneratorPass {
    tape: Tape,
    fake: Var,
    real: StftFeatures,
    fake_feats: StftFeatures,
    aux: Var,
    breakdown: AuxBreakdown,
}

impl TrainState {
    /// Fresh models seeded from `train.seed`; the data stream uses `seed + 3`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let generator = Generator::build(config.generator.clone(), seed)?;
        let wave_disc = WaveDiscriminators::build(config.wave_disc.clone(), seed.wrapping_add(1))?;
        let spec_disc = SpecDiscriminators::build(&config.stft, config.spec_disc.clone(), seed.wrapping_add(2))?;
        let t = &config.train;
        let (b1, b2) = (t.adam_beta1 as f32, t.adam_beta2 as f32);
        let opt_g = Adam::new(generator.params(), t.lr_g as f32, b1, b2);
        let opt_wave = Adam::new(wave_disc.params(), t.lr_d as f32, b1, b2);
        let opt_spec = Adam::new(spec_disc.params(), t.lr_d as f32, b1, b2);
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        Ok(Self {
            config,
            generator,
            wave_disc,
            spec_disc,
            opt_g,
            opt_wave,
            opt_spec,
            step: 0,
            rng,
        })
    }

    pub fn in_pretraining(&self) -> bool {
        self.step < self.config.train.pretrain_steps
    }

    /// `batch_size` random aligned crops; utterances must already be long
    /// enough for a segment.
    pub fn sample_batch(&mut self, utterances: &[Utterance]) -> Result<Batch> {
        if utterances.is_empty() {
            return Err(Error::Config("no utterances to sample from".into()));
        }
        let (frames, hop) = (self.config.train.segment_frames, self.config.mel.hop);
        let mut segments = Vec::with_capacity(self.config.train.batch_size);
        for _ in 0..self.config.train.batch_size {
            let u = &utterances[self.rng.random_range(0..utterances.len())];
            let s = sample_segment(u, frames, hop, &mut self.rng)
                .ok_or_else(|| Error::Config(format!("utterance {} is shorter than one segment", u.id)))?;
            segments.push(s);
        }
        Batch::from_segments(&segments)
    }

    fn generator_pass(&self, batch: &Batch) -> Result<GeneratorPass> {
        let tape = Tape::new();
        let mel = tape.constant(batch.mel.clone());
        let fake = self.generator.forward(&tape, &mel)?;
        let real_wave = tape.constant(batch.wave.clone());
        let real = stft_features(&tape, &real_wave, &self.config.stft)?;
        let fake_feats = stft_features(&tape, &fake, &self.config.stft)?;
        let (aux, breakdown) = aux_loss(&tape, &real, &fake_feats)?;
        Ok(GeneratorPass {
            tape,
            fake,
            real,
            fake_feats,
            aux,
            breakdown,
        })
    }

    fn record(&self, phase: &str, aux: &AuxBreakdown) -> LossBreakdown {
        let (lr_g, lr_d) = self.config.train.learning_rates(self.step);
        LossBreakdown {
            step: self.step + 1,
            phase: phase.into(),
            lr_g,
            lr_d,
            sc_per_resolution: aux.sc.clone(),
            mag_per_resolution: aux.mag.clone(),
            aux: aux.aux,
            lambda: self.config.train.lambda,
            ..Default::default()
        }
    }

    fn non_finite(&self, batch: &Batch, record: &LossBreakdown) -> Error {
        log::error!(
            "non-finite loss at step {} on batch [{}]: {record:?}",
            record.step,
            batch.ids.join(", ")
        );
        Error::NonFiniteLoss {
            step: record.step,
            items: batch.ids.clone(),
        }
    }

    fn set_learning_rates(&mut self) {
        let (lr_g, lr_d) = self.config.train.learning_rates(self.step);
        self.opt_g.lr = lr_g as f32;
        self.opt_wave.lr = lr_d as f32;
        self.opt_spec.lr = lr_d as f32;
    }

    /// One generator update on the auxiliary loss alone.
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let pass = self.generator_pass(batch)?;
        let mut record = self.record("pretrain", &pass.breakdown);
        record.total_g = record.aux;
        if !record.all_finite() {
            return Err(self.non_finite(batch, &record));
        }
        let grads = pass.tape.backward(&pass.aux)?.for_store(self.generator.params());
        drop(pass);
        self.set_learning_rates();
        self.opt_g.update(self.generator.params_mut(), &grads);
        self.step += 1;
        Ok(record)
    }

    /// Discriminator loss on a shared pass; the generated side is detached.
    fn discriminator_update(&mut self, pass: &GeneratorPass, batch: &Batch) -> Result<(f64, Vec<Option<Tensor>>)> {
        let tape = &pass.tape;
        let real_wave = tape.constant(batch.wave.clone());
        let fake_wave = tape.detach(&pass.fake);
        let fake_spec = pass.fake_feats.detached(tape);
        let rw = self.wave_disc.forward(tape, &real_wave, false)?;
        let fw = self.wave_disc.forward(tape, &fake_wave, false)?;
        let rs = self.spec_disc.forward(tape, &pass.real.vars, false)?;
        let fs = self.spec_disc.forward(tape, &fake_spec.vars, false)?;
        let loss = discriminator_loss(tape, &rw, &fw, &rs, &fs)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(&loss)?;
        let (gw, gs) = (grads.for_store(self.wave_disc.params()), grads.for_store(self.spec_disc.params()));
        let generator_grads = grads.for_store(self.generator.params());
        self.set_learning_rates();
        self.opt_wave.update(self.wave_disc.params_mut(), &gw);
        self.opt_spec.update(self.spec_disc.params_mut(), &gs);
        Ok((value, generator_grads))
    }

    /// A single discriminator update, leaving the generator and the step
    /// counter alone.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<DiscriminatorStep> {
        let pass = self.generator_pass(batch)?;
        let (loss, generator_grads) = self.discriminator_update(&pass, batch)?;
        if !loss.is_finite() {
            let mut record = self.record("discriminator", &pass.breakdown);
            record.total_d = loss;
            return Err(self.non_finite(batch, &record));
        }
        Ok(DiscriminatorStep { loss, generator_grads })
    }

    /// One discriminator update on detached generated audio, then one
    /// generator update against the updated discriminators.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let pass = self.generator_pass(batch)?;
        let mut record = self.record("adversarial", &pass.breakdown);
        let (total_d, _) = self.discriminator_update(&pass, batch)?;
        record.total_d = total_d;
        if !total_d.is_finite() || !record.aux.is_finite() {
            return Err(self.non_finite(batch, &record));
        }
        let tape = &pass.tape;
        let fw = self.wave_disc.forward(tape, &pass.fake, true)?;
        let fs = self.spec_disc.forward(tape, &pass.fake_feats.vars, true)?;
        let objective = generator_loss(tape, &pass.aux, &fw, &fs, self.config.train.lambda)?;
        record.adv_wave = objective.adv_wave;
        record.adv_spec = objective.adv_spec;
        record.total_g = record.aux + self.config.train.lambda * (record.adv_wave + record.adv_spec);
        if !record.all_finite() {
            return Err(self.non_finite(batch, &record));
        }
        let grads = tape.backward(&objective.total)?.for_store(self.generator.params());
        drop(pass);
        self.set_learning_rates();
        self.opt_g.update(self.generator.params_mut(), &grads);
        self.step += 1;
        Ok(record)
    }

    /// Pretraining or adversarial step, by the current step counter.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        if self.in_pretraining() {
            self.pretrain_step(batch)
        } else {
            self.train_step(batch)
        }
    }

    /// Every parameter and optimizer array, by namespace, in store order.
    fn named_arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (ns, store, opt) in self.banks() {
            for (name, t) in store.iter() {
                out.push((format!("{ns}/{name}"), t.clone()));
            }
            for (kind, moments) in [("m", opt.first_moments()), ("v", opt.second_moments())] {
                for ((name, _), t) in store.iter().zip(moments) {
                    out.push((format!("opt_{ns}/{kind}/{name}"), t.clone()));
                }
            }
        }
        out
    }

    fn banks(&self) -> [(&'static str, &ParamStore, &Adam); 3] {
        [
            ("generator", self.generator.params(), &self.opt_g),
            ("wave_disc", self.wave_disc.params(), &self.opt_wave),
            ("spec_disc", self.spec_disc.params(), &self.opt_spec),
        ]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.clone(),
            config_text: self.config.to_toml_string()?,
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            optimizer_steps: [
                self.opt_g.step_count(),
                self.opt_wave.step_count(),
                self.opt_spec.step_count(),
            ],
            arrays: self.named_arrays(),
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds the state under the checkpoint's own config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::restore(ckpt.config.clone(), ckpt)
    }

    /// Binds checkpoint arrays to models built from `config`. Arrays are
    /// checked in store order, so errors name the first offending array.
    pub fn restore(config: Config, ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(config)?;
        let lookup = |name: &str, expected: &[usize]| -> Result<Tensor> {
            let t = ckpt.array(name).ok_or_else(|| Error::MissingArray(name.to_string()))?;
            if t.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        let expected = state.named_arrays();
        let mut loaded = Vec::with_capacity(expected.len());
        for (name, t) in &expected {
            loaded.push(lookup(name, t.shape())?);
        }
        if let Some((name, _)) = ckpt.arrays.iter().find(|(n, _)| !expected.iter().any(|(e, _)| e == n)) {
            return Err(Error::Config(format!("checkpoint array `{name}` has no counterpart in the model")));
        }

        let mut it = loaded.into_iter();
        let t = &state.config.train;
        let betas = (t.adam_beta1 as f32, t.adam_beta2 as f32);
        let (lr_g, lr_d) = (t.lr_g as f32, t.lr_d as f32);
        let mut fill = |store: &mut ParamStore, lr: f32, opt_step: u64| -> Adam {
            let ids: Vec<_> = store.ids().collect();
            for &id in &ids {
                *store.get_mut(id) = it.next().expect("counted above");
            }
            let m = ids.iter().map(|_| it.next().expect("counted above")).collect();
            let v = ids.iter().map(|_| it.next().expect("counted above")).collect();
            Adam::from_state(lr, betas, opt_step, m, v)
        };
        let [sg, sw, ss] = ckpt.optimizer_steps;
        state.opt_g = fill(state.generator.params_mut(), lr_g, sg);
        state.opt_wave = fill(state.wave_disc.params_mut(), lr_d, sw);
        state.opt_spec = fill(state.spec_disc.params_mut(), lr_d, ss);
        state.step = ckpt.step;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        state.rng = rng;
        Ok(state)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?)
}

/// Loads the manifest's utterances and drops those shorter than a segment.
pub fn training_utterances(config: &Config, manifest: &Manifest) -> Result<Vec<Utterance>> {
    if manifest.is_empty() {
        return Err(Error::Config("the training manifest has no entries".into()));
    }
    let frames = config.train.segment_frames;
    let utterances: Vec<Utterance> = load_utterances(manifest, config.mel.hop)?
        .into_iter()
        .filter(|u| {
            let keep = u.mel.frames >= frames;
            if !keep {
                log::warn!("skipping {}: {} frames < segment of {frames}", u.id, u.mel.frames);
            }
            keep
        })
        .collect();
    if utterances.is_empty() {
        return Err(Error::Config(format!("no manifest utterance has at least {frames} frames")));
    }
    if let Some(u) = utterances.iter().find(|u| u.mel.n_mels != config.mel.n_mels) {
        return Err(Error::Config(format!(
            "{} has {} mel bands but the config expects {}",
            u.id, u.mel.n_mels, config.mel.n_mels
        )));
    }
    Ok(utterances)
}

/// Final state, the complete loss log and the checkpoints written.
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossBreakdown>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Runs `config` from scratch, or from `resume`, until `train.total_steps`.
/// Writes `train_log.jsonl`, periodic `step_*.umck` files and `final.umck`
/// into `out_dir`.
pub fn train(config: &Config, manifest: &Manifest, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let utterances = training_utterances(config, manifest)?;
    let state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != *config {
                log::warn!("resuming {} under a config that differs from the stored one", path.display());
            }
            TrainState::restore(config.clone(), &ckpt)?
        }
        None => TrainState::new(config.clone())?,
    };
    run(state, &utterances, out_dir)
}

/// Continues a trained checkpoint for `steps` more updates on `manifest`,
/// typically predicted features paired with ground-truth audio.
pub fn finetune(ckpt_path: &Path, manifest: &Manifest, out_dir: &Path, steps: u64) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut config = ckpt.config.clone();
    config.train.total_steps = ckpt.step + steps;
    config.train.pretrain_steps = config.train.pretrain_steps.min(config.train.total_steps);
    let utterances = training_utterances(&config, manifest)?;
    let state = TrainState::restore(config, &ckpt)?;
    run(state, &utterances, out_dir)
}

fn run(mut state: TrainState, utterances: &[Utterance], out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = if state.step > 0 && log_path.exists() {
        read_loss_log(&log_path)?
            .into_iter()
            .filter(|r| r.step <= state.step)
            .collect()
    } else {
        Vec::new()
    };
    let mut writer = BufWriter::new(File::create(&log_path)?);
    for r in &log {
        writeln!(writer, "{}", serde_json::to_string(r)?)?;
    }
    writer.flush()?;

    let total = state.config.train.total_steps;
    let interval = state.config.train.checkpoint_interval;
    let mut checkpoints = Vec::new();
    while state.step < total {
        let batch = state.sample_batch(utterances)?;
        let record = state.step(&batch)?;
        writeln!(writer, "{}", serde_json::to_string(&record)?)?;
        writer.flush()?;
        if state.step % interval == 0 && state.step < total {
            let path = out_dir.join(checkpoint_name(state.step));
            state.save_checkpoint(&path)?;
            checkpoints.push(path);
        }
        if state.step % 100 == 0 {
            log::info!(
                "step {} [{}] aux {:.4} total_g {:.4} total_d {:.4}",
                record.step,
                record.phase,
                record.aux,
                record.total_g,
                record.total_d
            );
        }
        log.push(record);
    }
    let path = out_dir.join(FINAL_CHECKPOINT);
    state.save_checkpoint(&path)?;
    checkpoints.push(path);
    Ok(TrainOutcome {
        state,
        log,
        checkpoints,
    })
}

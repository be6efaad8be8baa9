use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use unimelgan_core::dataset::Manifest;
use unimelgan_core::frontend::preprocess_dir;
use unimelgan_core::trainer::{finetune, train, TrainOutcome};
use unimelgan_core::vocoder::{benchmark_rtf, highband_distance, Vocoder};
use unimelgan_core::{Config, Waveform};

#[derive(Parser)]
#[command(name = "unimelgan", version, about = "Universal MelGAN vocoder tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Condition every WAV in a directory and extract normalized features.
    Preprocess {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Config whose [preprocess] and [mel] sections are used; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides preprocess.target_lufs.
        #[arg(long, allow_hyphen_values = true)]
        target_lufs: Option<f64>,
        /// Overrides preprocess.highpass_hz.
        #[arg(long)]
        highpass_hz: Option<f64>,
        #[command(flatten)]
        json: JsonOut,
    },
    /// Pretrain then adversarially train from a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue a checkpoint on predicted features paired with recordings.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        steps: u64,
    },
    /// Features to 16-bit PCM, or copy synthesis of a recording.
    Vocode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "wav", required_unless_present = "wav")]
        features: Option<PathBuf>,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median real-time factor of the generator forward pass.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[command(flatten)]
        json: JsonOut,
    },
    /// 6-12 kHz log-magnitude distance and energy ratio between two files.
    Highband {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[command(flatten)]
        json: JsonOut,
    },
}

#[derive(Args)]
struct JsonOut {
    /// Write the report here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl JsonOut {
    fn emit(&self, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        match &self.json {
            Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
            None => {
                println!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Serialize)]
struct PreprocessSummary {
    manifest: PathBuf,
    processed: usize,
    skipped: Vec<Skipped>,
}

#[derive(Serialize)]
struct Skipped {
    path: PathBuf,
    reason: String,
}

fn summarize(outcome: &TrainOutcome) {
    if let Some(last) = outcome.log.last() {
        log::info!(
            "finished at step {} [{}]: aux {:.5}, total_g {:.5}, total_d {:.5}",
            last.step,
            last.phase,
            last.aux,
            last.total_g,
            last.total_d
        );
    }
    for c in &outcome.checkpoints {
        println!("{}", c.display());
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            in_dir,
            out_dir,
            config,
            target_lufs,
            highpass_hz,
            json,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = target_lufs {
                cfg.preprocess.target_lufs = v;
            }
            if let Some(v) = highpass_hz {
                cfg.preprocess.highpass_hz = v;
            }
            let report = preprocess_dir(&in_dir, &out_dir, &cfg.preprocess, &cfg.mel)?;
            json.emit(&PreprocessSummary {
                manifest: report.manifest_path,
                processed: report.manifest.len(),
                skipped: report
                    .skipped
                    .into_iter()
                    .map(|(path, reason)| Skipped { path, reason })
                    .collect(),
            })?;
        }
        Command::Train {
            config,
            manifest,
            out_dir,
            resume,
        } => {
            let cfg = load_config(Some(&config))?;
            let manifest = Manifest::read(&manifest)?;
            summarize(&train(&cfg, &manifest, &out_dir, resume.as_deref())?);
        }
        Command::Finetune {
            ckpt,
            manifest,
            out_dir,
            steps,
        } => {
            let manifest = Manifest::read(&manifest)?;
            summarize(&finetune(&ckpt, &manifest, &out_dir, steps)?);
        }
        Command::Vocode {
            ckpt,
            features,
            wav,
            out,
        } => {
            let vocoder = Vocoder::load(&ckpt)?;
            match (features, wav) {
                (Some(f), _) => {
                    vocoder.vocode_file(&f, &out)?;
                }
                (None, Some(w)) => {
                    let y = vocoder.copy_synthesis(&Waveform::read_wav(&w)?)?;
                    let clamped = y.write_wav_i16(&out)?;
                    log::info!("wrote {} samples to {} ({clamped} clamped)", y.len(), out.display());
                }
                (None, None) => bail!("one of --features or --wav is required"),
            }
        }
        Command::Bench {
            ckpt,
            seconds,
            runs,
            warmup,
            json,
        } => {
            let vocoder = Vocoder::load(&ckpt)?;
            json.emit(&benchmark_rtf(&vocoder.generator, seconds, runs, warmup)?)?;
        }
        Command::Highband { reference, gen, json } => {
            let report = highband_distance(&Waveform::read_wav(&reference)?, &Waveform::read_wav(&gen)?)?;
            json.emit(&report)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

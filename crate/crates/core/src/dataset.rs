//! Training manifests and aligned segment sampling.
//!
//! A manifest is line-delimited `wave_path<TAB>feature_path<TAB>frames`, with
//! an optional fourth `split` column. Relative paths resolve against the
//! manifest's directory. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::frontend::features::read_features;
use crate::frontend::mel::MelSpectrogram;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wave: PathBuf,
    pub features: PathBuf,
    pub frames: usize,
    pub split: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected 3 or 4 tab-separated columns, found {}", n + 1, cols.len()),
                ));
            }
            let frames = cols[2].trim().parse::<usize>().map_err(|e| {
                Error::format(origin, format!("line {}: bad frame count {:?}: {e}", n + 1, cols[2]))
            })?;
            entries.push(ManifestEntry {
                wave: base.join(cols[0]),
                features: base.join(cols[1]),
                frames,
                split: cols.get(3).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Writes paths relative to `dir` when they live beneath it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for e in &self.entries {
            write!(out, "{}\t{}\t{}", rel(&e.wave), rel(&e.features), e.frames).unwrap();
            if let Some(s) = &e.split {
                write!(out, "\t{s}").unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entries whose split tag is `split`, or untagged entries when `split`
    /// is `"train"`.
    pub fn split(&self, split: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| e.split.as_deref().map_or(split == "train", |s| s == split))
                .cloned()
                .collect(),
        }
    }
}

/// One loaded utterance: normalized features and the matching waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mel: MelSpectrogram,
    pub wave: Waveform,
}

impl Utterance {
    /// Checks that the wave is within one hop of `hop * frames`.
    pub fn new(id: impl Into<String>, mel: MelSpectrogram, wave: Waveform, hop: usize) -> Result<Self> {
        let id = id.into();
        let span = hop * mel.frames;
        if wave.len() > span || span - wave.len() > hop {
            return Err(Error::InvalidInput(format!(
                "{id}: {} samples do not match {} frames at hop {hop}",
                wave.len(),
                mel.frames
            )));
        }
        Ok(Self { id, mel, wave })
    }
}

pub fn load_utterances(manifest: &Manifest, hop: usize) -> Result<Vec<Utterance>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let mel = read_features(&e.features)?;
            if mel.frames != e.frames {
                return Err(Error::format(
                    &e.features,
                    format!("manifest says {} frames, file holds {}", e.frames, mel.frames),
                ));
            }
            let wave = Waveform::read_wav(&e.wave)?;
            let id = e.wave.file_stem().map_or_else(
                || e.wave.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            Utterance::new(id, mel, wave, hop)
        })
        .collect()
}

/// Aligned training crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: String,
    pub start_frame: usize,
    pub mel: MelSpectrogram,
    /// Exactly `hop * frames` samples; zero-filled past the end of the
    /// utterance (at most `hop - 1` samples).
    pub wave: Vec<f32>,
}

/// Mel frames `[s, s + F)` with wave samples `[hop s, hop (s + F))`, `s`
/// uniform. `None` when the utterance has fewer than `F` frames.
pub fn sample_segment<R: Rng>(u: &Utterance, frames: usize, hop: usize, rng: &mut R) -> Option<Segment> {
    if u.mel.frames < frames || frames == 0 {
        log::warn!("skipping {}: {} frames < segment of {frames}", u.id, u.mel.frames);
        return None;
    }
    let start = rng.random_range(0..=u.mel.frames - frames);
    Some(segment_at(u, start, frames, hop))
}

pub fn segment_at(u: &Utterance, start: usize, frames: usize, hop: usize) -> Segment {
    let mel = u.mel.crop(start, frames).expect("crop inside the utterance");
    let (lo, hi) = (start * hop, (start + frames) * hop);
    let mut wave = vec![0.0f32; hi - lo];
    let avail = u.wave.len().min(hi).saturating_sub(lo);
    wave[..avail].copy_from_slice(&u.wave.samples[lo..lo + avail]);
    Segment {
        id: u.id.clone(),
        start_frame: start,
        mel,
        wave,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utterance(frames: usize) -> Utterance {
        let vals = (0..100 * frames).map(|i| (i % frames) as f32).collect();
        let mel = MelSpectrogram::new(100, frames, vals).unwrap();
        let wave = Waveform::new((0..256 * frames - 100).map(|i| i as f32).collect(), 24_000);
        Utterance::new("u", mel, wave, 256).unwrap()
    }

    #[test]
    fn parse_and_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = "# comment\na.wav\ta.umel\t40\nsub/b.wav\tb.umel\t7\tvalid\n\n";
        let m = Manifest::parse(text, dir.path(), Path::new("m.tsv")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].split.as_deref(), Some("valid"));
        assert_eq!(m.split("train").len(), 1);
        let path = dir.path().join("m.tsv");
        m.write(&path).unwrap();
        assert_eq!(Manifest::read(&path).unwrap(), m);
        assert!(fs::read_to_string(&path).unwrap().starts_with("a.wav\ta.umel\t40\n"));
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        let err = Manifest::parse("a.wav\t3\n", Path::new("."), Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = Manifest::parse("a\tb\tx\n", Path::new("."), Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn crops_are_aligned() {
        let u = utterance(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = sample_segment(&u, 32, 256, &mut rng).unwrap();
            assert_eq!(s.wave.len(), 8192);
            assert_eq!(s.mel.frames, 32);
            assert_eq!(s.mel.at(0, 0), s.start_frame as f32);
            let first = s.start_frame * 256;
            assert_eq!(s.wave[0], first as f32);
        }
    }

    #[test]
    fn whole_utterance_at_start_zero() {
        let u = utterance(32);
        let s = segment_at(&u, 0, 32, 256);
        assert_eq!(s.mel, u.mel);
        assert_eq!(&s.wave[..u.wave.len()], &u.wave.samples[..]);
        assert!(s.wave[u.wave.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_utterances_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_segment(&utterance(10), 32, 256, &mut rng).is_none());
    }
}

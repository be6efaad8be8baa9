//! The `UMELCKPT` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "UMELCKPT"
//! version      u16
//! digest       32 bytes SHA-256 of the config text
//! config_len   u32, then config_len bytes of TOML
//! step         u64
//! rng_seed     32 bytes
//! rng_stream   u64
//! rng_word_pos u128
//! opt_steps    3 x u64 (generator, waveform, spectrogram)
//! arrays       u32 count, then per array:
//!              u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
//!              product(dims) x f32
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use unimelgan_tensor::Tensor;

use crate::config::Config;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UMELCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serialized random-stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// A decoded checkpoint before it is bound to models.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Config text exactly as stored.
    pub config_text: String,
    pub step: u64,
    pub rng: RngState,
    /// Adam step counts for the generator, waveform and spectrogram banks.
    pub optimizer_steps: [u64; 3],
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_u16::<LE>(CHECKPOINT_VERSION)?;
        out.write_all(&Sha256::digest(self.config_text.as_bytes()))?;
        out.write_u32::<LE>(self.config_text.len() as u32)?;
        out.write_all(self.config_text.as_bytes())?;
        out.write_u64::<LE>(self.step)?;
        out.write_all(&self.rng.seed)?;
        out.write_u64::<LE>(self.rng.stream)?;
        out.write_u128::<LE>(self.rng.word_pos)?;
        for s in self.optimizer_steps {
            out.write_u64::<LE>(s)?;
        }
        out.write_u32::<LE>(self.arrays.len() as u32)?;
        for (name, t) in &self.arrays {
            out.write_u16::<LE>(name.len() as u16)?;
            out.write_all(name.as_bytes())?;
            out.write_u8(t.rank() as u8)?;
            for &d in t.shape() {
                out.write_u32::<LE>(d as u32)?;
            }
            for &v in t.data() {
                out.write_f32::<LE>(v)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |_| Error::format(path, "truncated checkpoint");
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic bytes, not a UMELCKPT checkpoint"));
        }
        let version = r.read_u16::<LE>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(truncated)?;
        let len = r.read_u32::<LE>().map_err(truncated)? as usize;
        let text = read_bytes(&mut r, len).map_err(truncated)?;
        if Sha256::digest(&text).as_slice() != digest {
            return Err(Error::format(path, "config digest does not match the stored config"));
        }
        let config_text =
            String::from_utf8(text).map_err(|_| Error::format(path, "config text is not UTF-8"))?;
        let config = Config::from_toml_str(&config_text)?;
        let step = r.read_u64::<LE>().map_err(truncated)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(truncated)?;
        let stream = r.read_u64::<LE>().map_err(truncated)?;
        let word_pos = r.read_u128::<LE>().map_err(truncated)?;
        let mut optimizer_steps = [0u64; 3];
        for s in &mut optimizer_steps {
            *s = r.read_u64::<LE>().map_err(truncated)?;
        }
        let count = r.read_u32::<LE>().map_err(truncated)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = r.read_u16::<LE>().map_err(truncated)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, n).map_err(truncated)?)
                .map_err(|_| Error::format(path, "array name is not UTF-8"))?;
            let rank = r.read_u8().map_err(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LE>().map_err(truncated)? as usize);
            }
            let numel: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if numel.checked_mul(4).is_none_or(|b| b > remaining) {
                return Err(Error::format(path, "truncated checkpoint"));
            }
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LE>(&mut data).map_err(truncated)?;
            arrays.push((name, Tensor::new(shape, data)));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last array"));
        }
        Ok(Self {
            config,
            config_text,
            step,
            rng: RngState { seed, stream, word_pos },
            optimizer_steps,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.encode()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?, path)
    }
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize) -> std::io::Result<Vec<u8>> {
    if n > r.get_ref().len().saturating_sub(r.position() as usize) {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

//! The `UMELFEAT` per-utterance feature container.
//!
//! Layout, little-endian: 8 magic bytes, `u16` version, `u16` n_mels,
//! `u32` frames, `f32` mean, `f32` std, then `n_mels * frames` `f32` values
//! band-major. Files written here always hold normalized features.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::frontend::mel::MelSpectrogram;

pub const FEATURE_MAGIC: &[u8; 8] = b"UMELFEAT";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 2 + 4 + 4 + 4;

pub fn encode_features(m: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.write_u16::<LittleEndian>(FEATURE_VERSION).unwrap();
    out.write_u16::<LittleEndian>(m.n_mels as u16).unwrap();
    out.write_u32::<LittleEndian>(m.frames as u32).unwrap();
    out.write_f32::<LittleEndian>(m.mean).unwrap();
    out.write_f32::<LittleEndian>(m.std).unwrap();
    for &v in &m.values {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<MelSpectrogram> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a UMELFEAT feature file"));
    }
    let mut r = Cursor::new(&bytes[8..]);
    let version = r.read_u16::<LittleEndian>()?;
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let n_mels = r.read_u16::<LittleEndian>()? as usize;
    let frames = r.read_u32::<LittleEndian>()? as usize;
    let mean = r.read_f32::<LittleEndian>()?;
    let std = r.read_f32::<LittleEndian>()?;
    let expected = HEADER_LEN + 4 * n_mels * frames;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {n_mels} x {frames}, found {}", bytes.len()),
        ));
    }
    let mut values = vec![0.0f32; n_mels * frames];
    r.read_f32_into::<LittleEndian>(&mut values)?;
    let mut m = MelSpectrogram::new(n_mels, frames, values)?;
    m.mean = mean;
    m.std = std;
    m.normalized = true;
    if !m.values.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, "non-finite feature values"));
    }
    Ok(m)
}

pub fn write_features(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_features(m))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MelSpectrogram {
        let mut m = MelSpectrogram::new(3, 2, vec![0.5, -1.0, 2.0, 0.0, -0.25, 1.5]).unwrap();
        m.mean = -4.5;
        m.std = 2.25;
        m.normalized = true;
        m
    }

    #[test]
    fn round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.umel");
        write_features(&path, &sample()).unwrap();
        assert_eq!(read_features(&path).unwrap(), sample());
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_features(&sample());
        assert_eq!(&bytes[..8], b"UMELFEAT");
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(&bytes[10..12], &[3, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &(-4.5f32).to_le_bytes());
        assert_eq!(&bytes[24..28], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 6 * 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("x");
        let mut bytes = encode_features(&sample());
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        bytes[8] = 9;
        assert!(matches!(decode_features(&bytes, p), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes, p), Err(Error::Format { .. })));
    }
}

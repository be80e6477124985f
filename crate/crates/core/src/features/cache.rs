use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureError, Result, Spectrogram};

pub const CACHE_MAGIC: &[u8; 4] = b"AUMF";
pub const CACHE_VERSION: u32 = 1;

/// Writes `AUMF`, version, `F`, `T` (u32 LE) then `F*T` f32 LE values.
pub fn write_cache(path: &Path, s: &Spectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    for v in [CACHE_VERSION, s.n_mels() as u32, s.frames() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in s.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cached spectrogram. Cached features are stored after
/// normalization, so the result carries `normalization` when given.
pub fn read_cache(path: &Path, normalization: Option<(f64, f64)>) -> Result<Spectrogram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| FeatureError::Format(format!("{}: truncated feature header", path.display())))?;
    if &header[..4] != CACHE_MAGIC {
        return Err(FeatureError::Format(format!("{}: not a feature cache file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(1) != CACHE_VERSION {
        return Err(FeatureError::Format(format!(
            "{}: unsupported cache version {}",
            path.display(),
            word(1)
        )));
    }
    let (f, t) = (word(2) as usize, word(3) as usize);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != f * t * 4 {
        return Err(FeatureError::Format(format!(
            "{}: expected {} payload bytes for {f} x {t}, found {}",
            path.display(),
            f * t * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut s = Spectrogram::new(f, t, values)?;
    s.normalization = normalization;
    Ok(s)
}

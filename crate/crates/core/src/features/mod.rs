//! Audio frontend: WAV ingestion, log-mel spectrograms, normalization and
//! the square-patch tokenization consumed by the encoder.

mod cache;
mod manifest;
mod mel;
mod wav;

pub use cache::{read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry};
pub use mel::{hz_to_mel, log_mel_spectrogram, mel_filterbank, mel_to_hz, MelFilterbank};
pub use wav::{load_waveform, write_waveform, Waveform};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ops, Array, NumericsError, Scalar, Var};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Frontend constants. Defaults produce 128 x 1024 spectrograms from 10 s
/// of 16 kHz audio and 16 x 16 non-overlapping patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub target_frames: usize,
    /// Analysis window length in samples (25 ms).
    pub win_length: usize,
    pub n_fft: usize,
    pub hop_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Added to mel power before the log.
    pub log_floor: f64,
    pub dataset_mean: f64,
    pub dataset_std: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            n_mels: 128,
            target_frames: 1024,
            win_length: 400,
            n_fft: 512,
            hop_length: 156,
            f_min: 20.0,
            f_max: 8_000.0,
            log_floor: 1e-6,
            dataset_mean: -4.268,
            dataset_std: 4.569,
            patch_size: 16,
            patch_stride: 16,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FeatureError::Config(m));
        if self.sample_rate == 0 || self.n_mels == 0 || self.target_frames == 0 || self.hop_length == 0 {
            return bad("sample_rate, n_mels, target_frames and hop_length must be positive".into());
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad(format!("win_length {} must be in 1..=n_fft ({})", self.win_length, self.n_fft));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad(format!("mel range {}..{} Hz is not inside 0..Nyquist", self.f_min, self.f_max));
        }
        if !(self.log_floor > 0.0) || !(self.dataset_std > 0.0) {
            return bad("log_floor and dataset_std must be positive".into());
        }
        if self.patch_size == 0 || self.patch_stride != self.patch_size {
            return bad(format!(
                "patch stride {} must equal patch size {}",
                self.patch_stride, self.patch_size
            ));
        }
        if self.n_mels % self.patch_size != 0 || self.target_frames % self.patch_size != 0 {
            return bad(format!(
                "F={} and T={} must be divisible by p={}",
                self.n_mels, self.target_frames, self.patch_size
            ));
        }
        Ok(())
    }

    /// Samples covered by `target_frames` frames.
    pub fn samples_needed(&self) -> usize {
        self.win_length + (self.target_frames - 1) * self.hop_length
    }

    pub fn num_patches(&self) -> usize {
        (self.n_mels / self.patch_size) * (self.target_frames / self.patch_size)
    }
}

/// Log-mel spectrogram, `F` mel rows by `T` frame columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
    n_mels: usize,
    frames: usize,
    /// `(mean, std)` once normalized.
    normalization: Option<(f64, f64)>,
}

impl Spectrogram {
    pub fn new(n_mels: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if n_mels == 0 || frames == 0 {
            return Err(FeatureError::Empty(format!("spectrogram of size {n_mels} x {frames}")));
        }
        if values.len() != n_mels * frames {
            return Err(FeatureError::Shape(format!(
                "{n_mels} x {frames} spectrogram needs {} values, got {}",
                n_mels * frames,
                values.len()
            )));
        }
        Ok(Spectrogram {
            values,
            n_mels,
            frames,
            normalization: None,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    /// Same geometry and normalization state with new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        let mut s = Spectrogram::new(self.n_mels, self.frames, values)?;
        s.normalization = self.normalization;
        Ok(s)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn normalization(&self) -> Option<(f64, f64)> {
        self.normalization
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// `(v - mean) / (2 std)`. Fails on an already normalized spectrogram.
    pub fn normalize(mut self, mean: f64, std: f64) -> Result<Self> {
        if let Some((m, s)) = self.normalization {
            return Err(FeatureError::State(format!(
                "spectrogram already normalized with mean {m}, std {s}"
            )));
        }
        if !(std > 0.0) {
            return Err(FeatureError::Config(format!("normalization std must be positive, got {std}")));
        }
        let denom = 2.0 * std;
        for v in &mut self.values {
            *v = ((*v as f64 - mean) / denom) as f32;
        }
        self.normalization = Some((mean, std));
        Ok(self)
    }
}

/// Non-overlapping square patches in time-major order: patch index
/// `c * (F/p) + r` holds rows `[r p, (r+1) p)` and columns `[c p, (c+1) p)`,
/// flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[num_patches, p * p]`
    pub patches: Array<f32>,
    /// Frequency rows of the grid (`F / p`).
    pub grid_rows: usize,
    /// Time columns of the grid (`T / p`).
    pub grid_cols: usize,
    pub patch_size: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence index of grid cell `(row, col)`.
    pub fn index_of(&self, row: usize, col: usize) -> usize {
        col * self.grid_rows + row
    }
}

pub fn patchify(s: &Spectrogram, p: usize) -> Result<PatchSequence> {
    let (f, t) = (s.n_mels, s.frames);
    if p == 0 || f % p != 0 || t % p != 0 {
        return Err(FeatureError::Shape(format!(
            "spectrogram F={f}, T={t} is not divisible by patch size p={p}"
        )));
    }
    let (rows, cols) = (f / p, t / p);
    let mut out = Vec::with_capacity(f * t);
    for c in 0..cols {
        for r in 0..rows {
            for i in 0..p {
                let start = (r * p + i) * t + c * p;
                out.extend_from_slice(&s.values[start..start + p]);
            }
        }
    }
    Ok(PatchSequence {
        patches: Array::new(&[rows * cols, p * p], out)?,
        grid_rows: rows,
        grid_cols: cols,
        patch_size: p,
    })
}

/// Inverse of [`patchify`]; the result is unnormalized-flagged.
pub fn unpatchify(ps: &PatchSequence) -> Result<Spectrogram> {
    let p = ps.patch_size;
    let (f, t) = (ps.grid_rows * p, ps.grid_cols * p);
    let mut values = vec![0.0; f * t];
    for c in 0..ps.grid_cols {
        for r in 0..ps.grid_rows {
            let patch = ps.patches.row(ps.index_of(r, c));
            for i in 0..p {
                let start = (r * p + i) * t + c * p;
                values[start..start + p].copy_from_slice(&patch[i * p..(i + 1) * p]);
            }
        }
    }
    Spectrogram::new(f, t, values)
}

/// `E_i = S_i W + b` for every patch: `[N, p*p] -> [N, D]`.
pub fn embed_patches<'t, T: Scalar>(patches: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ps, ws, bs) = (patches.shape(), w.shape(), b.shape());
    if ps.len() != 2 || ws.len() != 2 || ws[0] != ps[1] || bs != [ws[1]] {
        return Err(FeatureError::Shape(format!(
            "patch embedding expects patches [N, p*p], W [p*p, D], b [D]; got {ps:?}, {ws:?}, {bs:?}"
        )));
    }
    Ok(ops::linear(patches, w, Some(b))?)
}

/// Full frontend for one file: load, log-mel, normalize.
pub fn extract_file(path: &std::path::Path, cfg: &FeatureConfig) -> Result<Spectrogram> {
    let w = load_waveform(path)?;
    log_mel_spectrogram(&w, cfg)?.normalize(cfg.dataset_mean, cfg.dataset_std)
}

/// Extracts many files on up to `workers` threads. Results are returned in
/// input order regardless of scheduling.
pub fn extract_many(paths: &[PathBuf], cfg: &FeatureConfig, workers: usize) -> Vec<Result<Spectrogram>> {
    let workers = workers.clamp(1, paths.len().max(1));
    let per = paths.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .chunks(per)
            .map(|chunk| scope.spawn(move || chunk.iter().map(|p| extract_file(p, cfg)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("feature worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests;

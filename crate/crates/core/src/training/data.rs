use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::features::{self, log_mel_spectrogram, read_cache, FeatureConfig, Spectrogram, Waveform};

/// File listing cached features inside a feature directory.
pub const DATASET_INDEX: &str = "dataset.csv";

/// Labelled spectrograms held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spectrograms: Vec<Spectrogram>,
    pub labels: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub multi_label: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.spectrograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrograms.is_empty()
    }

    /// One-hot or multi-hot target row over `classes` outputs.
    pub fn target(&self, i: usize, classes: usize) -> Vec<f32> {
        let mut t = vec![0.0; classes];
        for &k in &self.labels[i] {
            t[k] = 1.0;
        }
        t
    }

    /// Reads `dataset.csv` and the cache files it lists.
    pub fn load(dir: &Path, normalization: Option<(f64, f64)>) -> Result<Self> {
        let manifest = features::read_manifest(&dir.join(DATASET_INDEX))?;
        let spectrograms = manifest
            .entries
            .iter()
            .map(|e| read_cache(&e.path, normalization))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Dataset {
            num_classes: manifest.num_classes(),
            labels: manifest.entries.into_iter().map(|e| e.labels).collect(),
            spectrograms,
            multi_label: manifest.multi_label,
        })
    }

    pub fn check_geometry(&self, n_mels: usize, frames: usize) -> Result<()> {
        if self.is_empty() {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        if let Some(s) = self
            .spectrograms
            .iter()
            .find(|s| (s.n_mels(), s.frames()) != (n_mels, frames))
        {
            return Err(TrainError::Data(format!(
                "spectrogram {} x {} does not match configured {n_mels} x {frames}",
                s.n_mels(),
                s.frames()
            )));
        }
        Ok(())
    }
}

/// Frontend settings of the synthetic set: 32 mel bands, 32 frames.
pub fn toy_feature_config() -> FeatureConfig {
    FeatureConfig {
        n_mels: 32,
        target_frames: 32,
        ..FeatureConfig::default()
    }
}

/// Balanced two-class clips: class 0 is a steady tone of random pitch,
/// class 1 is a few short white-noise bursts over silence.
pub fn toy_waveforms(n: usize, seed: u64, cfg: &FeatureConfig) -> Vec<(Waveform, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.samples_needed();
    let sr = cfg.sample_rate as f64;
    (0..n)
        .map(|i| {
            let class = i % 2;
            let mut s = vec![0.0f32; len];
            if class == 0 {
                let f = rng.gen_range(300.0..3000.0);
                let amp = rng.gen_range(0.1..0.5);
                let phase = rng.gen_range(0.0..2.0 * PI);
                for (t, v) in s.iter_mut().enumerate() {
                    *v = (amp * (2.0 * PI * f * t as f64 / sr + phase).sin()) as f32;
                }
            } else {
                for _ in 0..rng.gen_range(1..=3) {
                    let width = rng.gen_range(len / 16..len / 6);
                    let start = rng.gen_range(0..len - width);
                    let amp = rng.gen_range(0.1f32..0.5);
                    for v in &mut s[start..start + width] {
                        *v += amp * rng.gen_range(-1.0f32..1.0);
                    }
                }
            }
            (Waveform::new(s, cfg.sample_rate).expect("nonempty"), class)
        })
        .collect()
}

/// Synthetic dataset, normalized with its own mean and std. Returns the
/// frontend config with those statistics filled in.
pub fn toy_dataset(n: usize, seed: u64) -> Result<(Dataset, FeatureConfig)> {
    let mut cfg = toy_feature_config();
    let raw = toy_waveforms(n, seed, &cfg)
        .into_iter()
        .map(|(w, c)| Ok((log_mel_spectrogram(&w, &cfg)?, c)))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = raw.iter().flat_map(|(s, _)| s.values().iter().map(|&v| v as f64)).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    cfg.dataset_mean = mean;
    cfg.dataset_std = std;
    let mut spectrograms = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (s, c) in raw {
        spectrograms.push(s.normalize(mean, std)?);
        labels.push(vec![c]);
    }
    Ok((
        Dataset {
            spectrograms,
            labels,
            num_classes: 2,
            multi_label: false,
        },
        cfg,
    ))
}

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureConfig, FeatureError, Result, Spectrogram, Waveform};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, `[n_mels, n_fft/2 + 1]` row-major.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Center frequency of each band in Hz.
    pub centers: Vec<f64>,
}

/// Filters with edges equally spaced on the mel axis between `f_min` and
/// `f_max`; each triangle is linear in mel and peaks at 1.
pub fn mel_filterbank(cfg: &FeatureConfig) -> MelFilterbank {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)
        .collect();
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64))
        .collect();
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, &bm) in bin_mel.iter().enumerate() {
            let up = (bm - l) / (c - l);
            let down = (r - bm) / (r - c);
            weights[m * n_bins + k] = up.min(down).max(0.0);
        }
    }
    MelFilterbank {
        weights,
        n_mels: cfg.n_mels,
        n_bins,
        centers: edges[1..=cfg.n_mels].iter().map(|&m| mel_to_hz(m)).collect(),
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `log(mel power + floor)` over exactly `target_frames` frames. The clip is
/// zero-padded at the end or truncated to the samples those frames cover.
pub fn log_mel_spectrogram(w: &Waveform, cfg: &FeatureConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.samples.is_empty() {
        return Err(FeatureError::Empty("waveform has no samples".into()));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(FeatureError::Format(format!(
            "sample rate {} Hz does not match configured {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let needed = cfg.samples_needed();
    let mut samples: Vec<f64> = w.samples.iter().take(needed).map(|&s| s as f64).collect();
    samples.resize(needed, 0.0);

    let fb = mel_filterbank(cfg);
    let window = hann(cfg.win_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; fb.n_bins];
    let (f, t) = (cfg.n_mels, cfg.target_frames);
    let mut values = vec![0.0f32; f * t];
    for frame in 0..t {
        let start = frame * cfg.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            let v = if i < cfg.win_length { samples[start + i] * window[i] } else { 0.0 };
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..f {
            let row = &fb.weights[m * fb.n_bins..(m + 1) * fb.n_bins];
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * t + frame] = (e + cfg.log_floor).ln() as f32;
        }
    }
    Spectrogram::new(f, t, values)
}

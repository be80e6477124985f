use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{FeatureError, Result};

/// Mono samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(FeatureError::Format("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(FeatureError::Empty("waveform has no samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn hound_err(path: &Path, e: hound::Error) -> FeatureError {
    match e {
        hound::Error::IoError(io) => FeatureError::Io(io),
        other => FeatureError::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV. Integer samples are scaled by
/// `1 / 32768`; multichannel frames are averaged to mono.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (fmt, bits) => {
            return Err(FeatureError::Format(format!(
                "{}: unsupported encoding {fmt:?} {bits}-bit (expected PCM16 or float32)",
                path.display()
            )))
        }
    };
    let samples: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV.
pub fn write_waveform(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut out = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &w.samples {
        out.write_sample(s).map_err(|e| hound_err(path, e))?;
    }
    out.finalize().map_err(|e| hound_err(path, e))
}

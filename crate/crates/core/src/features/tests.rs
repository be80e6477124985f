use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tape;

fn write_i16(path: &Path, channels: u16, rate: u32, frames: &[Vec<i16>]) {
    let spec = WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).unwrap();
    for f in frames {
        for &s in f {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

fn write_f32(path: &Path, rate: u32, samples: &[f32]) {
    let spec = WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

fn small_cfg() -> FeatureConfig {
    FeatureConfig {
        n_mels: 32,
        target_frames: 32,
        ..Default::default()
    }
}

#[test]
fn silence_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.wav");
    write_i16(&p, 1, 16_000, &vec![vec![0]; 16_000]);
    let w = load_waveform(&p).unwrap();
    assert_eq!(w.sample_rate, 16_000);
    assert_eq!(w.samples.len(), 16_000);
    assert!(w.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn pcm16_scaling_is_one_over_32768() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sq.wav");
    let frames: Vec<Vec<i16>> = (0..64).map(|i| vec![if (i / 8) % 2 == 0 { 32767 } else { -32767 }]).collect();
    write_i16(&p, 1, 16_000, &frames);
    let w = load_waveform(&p).unwrap();
    let full = 32767.0f32 / 32768.0;
    assert!(w.samples.iter().all(|&s| s == full || s == -full));
}

#[test]
fn stereo_is_averaged_to_mono() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("st.wav");
    write_i16(&p, 2, 16_000, &vec![vec![16384, -16384]; 100]);
    let w = load_waveform(&p).unwrap();
    assert_eq!(w.samples.len(), 100);
    assert!(w.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn float_wav_loads_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.wav");
    write_f32(&p, 16_000, &[0.25, -0.5, 1.0]);
    assert_eq!(load_waveform(&p).unwrap().samples, vec![0.25, -0.5, 1.0]);
}

#[test]
fn bad_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_waveform(&dir.path().join("missing.wav")), Err(FeatureError::Io(_))));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"definitely not a riff file").unwrap();
    assert!(matches!(load_waveform(&junk), Err(FeatureError::Format(_))));

    let p24 = dir.path().join("p24.wav");
    let spec = WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 24,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(&p24, spec).unwrap();
    w.write_sample(1000i32).unwrap();
    w.finalize().unwrap();
    let err = load_waveform(&p24).unwrap_err();
    assert!(matches!(err, FeatureError::Format(ref m) if m.contains("24")), "{err}");
}

#[test]
fn silence_gives_constant_floor_spectrogram() {
    let cfg = small_cfg();
    let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
    let s = log_mel_spectrogram(&w, &cfg).unwrap();
    assert_eq!((s.n_mels(), s.frames()), (32, 32));
    let floor = (1e-6f64).ln() as f32;
    assert!(s.values().iter().all(|&v| v == floor));
}

#[test]
fn empty_waveform_is_rejected() {
    assert!(matches!(Waveform::new(vec![], 16_000), Err(FeatureError::Empty(_))));
    let w = Waveform {
        samples: vec![],
        sample_rate: 16_000,
    };
    assert!(matches!(log_mel_spectrogram(&w, &small_cfg()), Err(FeatureError::Empty(_))));
}

#[test]
fn ten_seconds_give_1024_frames() {
    let cfg = FeatureConfig::default();
    let w = Waveform::new(vec![0.01; 160_000], 16_000).unwrap();
    let s = log_mel_spectrogram(&w, &cfg).unwrap();
    assert_eq!((s.n_mels(), s.frames()), (128, 1024));
    // the last frame still lies inside the clip
    assert!(cfg.samples_needed() <= 160_000);
    assert_eq!(patchify(&s, 16).unwrap().len(), 512);
}

#[test]
fn short_clips_pad_and_long_clips_truncate() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = cfg.samples_needed();
    let base: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut long = base.clone();
    long.extend((0..5000).map(|_| rng.gen_range(-0.5f32..0.5)));
    let a = log_mel_spectrogram(&Waveform::new(base.clone(), 16_000).unwrap(), &cfg).unwrap();
    let b = log_mel_spectrogram(&Waveform::new(long, 16_000).unwrap(), &cfg).unwrap();
    assert_eq!(a, b);

    let mut padded = base[..1000].to_vec();
    let c = log_mel_spectrogram(&Waveform::new(padded.clone(), 16_000).unwrap(), &cfg).unwrap();
    padded.resize(n, 0.0);
    let d = log_mel_spectrogram(&Waveform::new(padded, 16_000).unwrap(), &cfg).unwrap();
    assert_eq!(c, d);
}

#[test]
fn sample_rate_mismatch_is_rejected() {
    let w = Waveform::new(vec![0.0; 8000], 8_000).unwrap();
    assert!(matches!(log_mel_spectrogram(&w, &small_cfg()), Err(FeatureError::Format(_))));
}

#[test]
fn pure_tone_peaks_in_its_band() {
    let cfg = FeatureConfig {
        target_frames: 16,
        ..Default::default()
    };
    let fb = mel_filterbank(&cfg);
    // Bands much narrower than an FFT bin cannot be resolved; test the ones
    // whose half-width spans at least two bins.
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut tested = 0;
    for band in (0..cfg.n_mels).step_by(5) {
        let lo = if band == 0 { cfg.f_min } else { fb.centers[band - 1] };
        if fb.centers[band] - lo < 2.0 * bin_hz {
            continue;
        }
        let f0 = fb.centers[band];
        let samples: Vec<f32> = (0..cfg.samples_needed())
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        let s = log_mel_spectrogram(&Waveform::new(samples, 16_000).unwrap(), &cfg).unwrap();
        for t in 0..s.frames() {
            let argmax = (0..s.n_mels())
                .max_by(|&a, &b| s.get(a, t).total_cmp(&s.get(b, t)))
                .unwrap();
            assert_eq!(argmax, band, "tone {f0:.1} Hz, frame {t}");
        }
        tested += 1;
    }
    assert!(tested >= 10, "only {tested} bands tested");
}

#[test]
fn filterbank_triangles_peak_at_centers() {
    let cfg = FeatureConfig::default();
    let fb = mel_filterbank(&cfg);
    assert_eq!(fb.weights.len(), 128 * 257);
    assert!(fb.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    for w in fb.centers.windows(2) {
        assert!(w[0] < w[1]);
    }
    assert!((hz_to_mel(mel_to_hz(1234.5)) - 1234.5).abs() < 1e-9);
    assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.5);
}

fn constant(v: f32, f: usize, t: usize) -> Spectrogram {
    Spectrogram::new(f, t, vec![v; f * t]).unwrap()
}

#[test]
fn normalize_examples() {
    let s = constant(-4.268, 4, 4).normalize(-4.268, 4.569).unwrap();
    assert!(s.values().iter().all(|&v| v.abs() < 1e-6));

    let s = constant(1.0, 2, 2).normalize(0.0, 0.5).unwrap();
    assert!(s.values().iter().all(|&v| v == 1.0));

    let s = constant(3.0, 2, 3).normalize(1.0, 2.0).unwrap();
    assert!(s.values().iter().all(|&v| v == 0.5));
    assert_eq!(s.normalization(), Some((1.0, 2.0)));
}

#[test]
fn double_normalization_is_a_state_error() {
    let s = constant(0.0, 2, 2).normalize(0.0, 1.0).unwrap();
    assert!(matches!(s.normalize(0.0, 1.0), Err(FeatureError::State(_))));
    assert!(matches!(constant(0.0, 2, 2).normalize(0.0, 0.0), Err(FeatureError::Config(_))));
}

#[test]
fn patchify_geometry() {
    let s = Spectrogram::new(16, 16, (0..256).map(|i| i as f32).collect()).unwrap();
    let ps = patchify(&s, 16).unwrap();
    assert_eq!(ps.len(), 1);
    assert_eq!(ps.patches.data(), s.values());

    let s = Spectrogram::new(32, 48, (0..32 * 48).map(|i| i as f32).collect()).unwrap();
    let ps = patchify(&s, 16).unwrap();
    assert_eq!((ps.len(), ps.grid_rows, ps.grid_cols), (6, 2, 3));
    // element (17, 0) -> grid cell (1, 0), local offset (1, 0)
    let idx = ps.index_of(1, 0);
    assert_eq!(idx, 1);
    assert_eq!(ps.patches.row(idx)[16], s.get(17, 0));
    // time-major: the two frequency rows of time column 1 follow column 0
    assert_eq!(ps.patches.row(2)[0], s.get(0, 16));
    assert_eq!(ps.patches.row(3)[0], s.get(16, 16));

    let err = patchify(&Spectrogram::new(20, 32, vec![0.0; 640]).unwrap(), 16).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("F=20") && msg.contains("T=32") && msg.contains("p=16"), "{msg}");
}

#[test]
fn embedding_examples() {
    let tape = Tape::<f64>::new();
    let s = Spectrogram::new(4, 4, (0..16).map(|i| i as f32 * 0.5).collect()).unwrap();
    let ps = patchify(&s, 2).unwrap();
    let x = tape.constant(ps.patches.cast::<f64>());
    let eye = tape.constant(Array::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
    let zero = tape.constant(Array::zeros(&[4]));
    assert_eq!(*embed_patches(x, eye, zero).unwrap().value(), ps.patches.cast::<f64>());

    let zw = tape.constant(Array::zeros(&[4, 3]));
    let beta = tape.constant(Array::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let e = embed_patches(x, zw, beta).unwrap();
    for r in 0..4 {
        assert_eq!(e.value().row(r), &[1.0, -2.0, 0.5]);
    }

    // two patches, by hand
    let two = tape.constant(Array::from_f64(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]).unwrap());
    let w = tape.constant(Array::from_f64(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]).unwrap());
    let b = tape.constant(Array::from_f64(&[2], &[0.5, -0.5]).unwrap());
    let e = embed_patches(two, w, b).unwrap();
    // [1+3-4, 2+3+8] + b ; [-1+1-2, 0+1+4] + b
    assert_eq!(e.value().data(), &[0.5, 12.5, -1.5, 4.5]);

    let w3 = tape.constant(Array::zeros(&[3, 3]));
    assert!(matches!(embed_patches(two, w3, beta), Err(FeatureError::Shape(_))));
}

#[test]
fn cache_round_trips_and_checks_magic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.aumf");
    let s = Spectrogram::new(3, 5, (0..15).map(|i| i as f32 - 7.25).collect()).unwrap();
    write_cache(&p, &s).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"AUMF");
    assert_eq!(bytes.len(), 16 + 15 * 4);
    assert_eq!(read_cache(&p, None).unwrap(), s);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(read_cache(&p, None), Err(FeatureError::Format(_))));
    std::fs::write(&p, &bytes[..20]).unwrap();
    assert!(matches!(read_cache(&p, None), Err(FeatureError::Format(_))));
}

#[test]
fn manifests_single_and_multi_label() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("a.csv");
    std::fs::write(&single, "path,label\nx.wav,1\n/abs/y.wav,0\n").unwrap();
    let m = read_manifest(&single).unwrap();
    assert!(!m.multi_label);
    assert_eq!(m.entries[0].path, dir.path().join("x.wav"));
    assert_eq!(m.entries[1].path, Path::new("/abs/y.wav"));
    assert_eq!(m.num_classes(), 2);

    let multi = dir.path().join("b.csv");
    std::fs::write(&multi, "path,label_ids\nx.wav,0;3;5\ny.wav,\n").unwrap();
    let m = read_manifest(&multi).unwrap();
    assert!(m.multi_label);
    assert_eq!(m.entries[0].labels, vec![0, 3, 5]);
    assert!(m.entries[1].labels.is_empty());
    assert_eq!(m.num_classes(), 6);

    let bad = dir.path().join("c.csv");
    std::fs::write(&bad, "path,label\nx.wav,cat\n").unwrap();
    assert!(matches!(read_manifest(&bad), Err(FeatureError::Format(_))));
}

#[test]
fn parallel_extraction_keeps_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let paths: Vec<_> = (0..7)
        .map(|i| {
            let p = dir.path().join(format!("{i}.wav"));
            let samples: Vec<f32> = (0..6000).map(|t| (t as f32 * 0.01 * (i + 1) as f32).sin() * 0.3).collect();
            write_f32(&p, 16_000, &samples);
            p
        })
        .collect();
    let serial = extract_many(&paths, &cfg, 1);
    let parallel = extract_many(&paths, &cfg, 3);
    for (a, b) in serial.iter().zip(&parallel) {
        assert_eq!(a.as_ref().unwrap(), b.as_ref().unwrap());
    }
    assert!(serial.iter().all(|s| s.as_ref().unwrap().is_normalized()));
}

#[test]
fn default_config_is_valid_and_checks_divisibility() {
    FeatureConfig::default().validate().unwrap();
    let bad = FeatureConfig {
        target_frames: 1000,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let overlapping = FeatureConfig {
        patch_stride: 10,
        ..Default::default()
    };
    assert!(overlapping.validate().is_err());
}

proptest! {
    #[test]
    fn patchify_round_trips(fr in 1usize..5, tc in 1usize..5, seed in any::<u64>()) {
        let (f, t) = (fr * 16, tc * 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Spectrogram::new(f, t, (0..f * t).map(|_| rng.gen()).collect()).unwrap();
        let ps = patchify(&s, 16).unwrap();
        prop_assert_eq!(ps.len(), fr * tc);
        prop_assert_eq!(unpatchify(&ps).unwrap(), s);
    }

    #[test]
    fn patchify_is_a_bijection_on_positions(fr in 1usize..4, tc in 1usize..4, p in 1usize..6) {
        let (f, t) = (fr * p, tc * p);
        let s = Spectrogram::new(f, t, (0..f * t).map(|i| i as f32).collect()).unwrap();
        let ps = patchify(&s, p).unwrap();
        let mut seen = vec![false; f * t];
        for &v in ps.patches.data() {
            let i = v as usize;
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn normalize_is_affine(c in -20.0f64..20.0, mean in -5.0f64..5.0, std in 0.1f64..5.0) {
        let s = constant(c as f32, 2, 3).normalize(mean, std).unwrap();
        let expect = ((c as f32 as f64 - mean) / (2.0 * std)) as f32;
        prop_assert!(s.values().iter().all(|&v| v == expect));
    }
}

#[test]
fn written_manifest_and_waveform_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    let w = Waveform::new(vec![0.0, 0.25, -0.5, 1.0], 16_000).unwrap();
    write_waveform(&wav, &w).unwrap();
    assert_eq!(load_waveform(&wav).unwrap(), w);

    for multi_label in [false, true] {
        let m = Manifest {
            entries: vec![
                ManifestEntry { path: wav.clone(), labels: vec![1] },
                ManifestEntry { path: dir.path().join("b.wav"), labels: if multi_label { vec![0, 2] } else { vec![0] } },
            ],
            multi_label,
        };
        let p = dir.path().join("m.csv");
        write_manifest(&p, &m).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("\na.wav,1"));
        assert_eq!(read_manifest(&p).unwrap(), m);
    }
}

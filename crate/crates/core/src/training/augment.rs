use std::ops::Range;

use rand::Rng;

use super::{Batch, Result};
use crate::features::Spectrogram;

/// Bands blanked by one SpecAugment draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecAugMask {
    pub freq: Range<usize>,
    pub time: Range<usize>,
}

/// Draws one frequency band and one time band, in the order
/// `width_f, start_f, width_t, start_t`. Widths are uniform on
/// `0..=max`; limits above the spectrogram size are clamped with a warning.
pub fn draw_masks<R: Rng + ?Sized>(n_mels: usize, frames: usize, f_max: usize, t_max: usize, rng: &mut R) -> SpecAugMask {
    let f_max = clamp_limit("frequency", f_max, n_mels);
    let t_max = clamp_limit("time", t_max, frames);
    let wf = rng.gen_range(0..=f_max);
    let sf = rng.gen_range(0..=n_mels - wf);
    let wt = rng.gen_range(0..=t_max);
    let st = rng.gen_range(0..=frames - wt);
    SpecAugMask {
        freq: sf..sf + wf,
        time: st..st + wt,
    }
}

fn clamp_limit(axis: &str, limit: usize, size: usize) -> usize {
    if limit > size {
        log::warn!("{axis} mask limit {limit} exceeds axis size {size}; clamped");
        size
    } else {
        limit
    }
}

/// Sets the masked rows and columns to the pre-mask mean.
pub fn apply_masks(s: &Spectrogram, mask: &SpecAugMask) -> Result<Spectrogram> {
    if mask.freq.is_empty() && mask.time.is_empty() {
        return Ok(s.clone());
    }
    let fill = s.mean() as f32;
    let t = s.frames();
    let mut v = s.values().to_vec();
    for f in mask.freq.clone() {
        v[f * t..(f + 1) * t].fill(fill);
    }
    for f in 0..s.n_mels() {
        for c in mask.time.clone() {
            v[f * t + c] = fill;
        }
    }
    Ok(s.with_values(v)?)
}

/// One frequency and one time mask filled with the spectrogram mean.
pub fn spec_augment<R: Rng + ?Sized>(
    s: &Spectrogram,
    f_max: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<(Spectrogram, SpecAugMask)> {
    let mask = draw_masks(s.n_mels(), s.frames(), f_max, t_max, rng);
    Ok((apply_masks(s, &mask)?, mask))
}

/// `x' = lam x_i + (1 - lam) x_j`, and the same for targets.
pub fn mix_pair(
    xi: &Spectrogram,
    xj: &Spectrogram,
    yi: &[f32],
    yj: &[f32],
    lam: f64,
) -> Result<(Spectrogram, Vec<f32>)> {
    let (a, b) = (lam as f32, (1.0 - lam) as f32);
    let x = xi.values().iter().zip(xj.values()).map(|(&p, &q)| a * p + b * q).collect();
    let y = yi.iter().zip(yj).map(|(&p, &q)| a * p + b * q).collect();
    Ok((xi.with_values(x)?, y))
}

/// Mixing weight: uniform on `[0, 1]`, pulled toward 0.5 by `alpha`.
pub fn mixup_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    0.5 + (u - 0.5) * (1.0 - alpha)
}

/// Blends each sample, with probability `alpha`, with a partner drawn from
/// a random permutation of the batch. `alpha = 0` returns the batch as is.
pub fn mixup<R: Rng + ?Sized>(batch: &Batch, alpha: f64, rng: &mut R) -> Result<Batch> {
    if alpha <= 0.0 || batch.len() < 2 {
        return Ok(batch.clone());
    }
    let n = batch.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mut out = Batch {
        spectrograms: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
    };
    for i in 0..n {
        let j = perm[i];
        if rng.gen::<f64>() < alpha {
            let lam = mixup_lambda(alpha, rng);
            let (x, y) = mix_pair(
                &batch.spectrograms[i],
                &batch.spectrograms[j],
                &batch.targets[i],
                &batch.targets[j],
                lam,
            )?;
            out.spectrograms.push(x);
            out.targets.push(y);
        } else {
            out.spectrograms.push(batch.spectrograms[i].clone());
            out.targets.push(batch.targets[i].clone());
        }
    }
    Ok(out)
}

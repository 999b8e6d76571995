use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Zero padding on each side before the random crop.
    pub pad: usize,
    /// Crop side; `None` keeps the input size.
    pub crop: Option<usize>,
    pub flip: bool,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(ds: &LabeledImageSet) -> (Vec<f64>, Vec<f64>) {
    let shape = ds.image_shape();
    let (ch, plane) = (shape[0], shape[1] * shape[2]);
    let mut sum = vec![0.0; ch];
    let mut sq = vec![0.0; ch];
    for (i, v) in ds.images().data().iter().enumerate() {
        let c = (i / plane) % ch;
        sum[c] += v;
        sq[c] += v * v;
    }
    let n = (ds.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

/// `(x - mean[c]) / std[c]` for a `[B, C, H, W]` batch.
pub fn normalize(batch: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || mean.len() != s[1] || std.len() != s[1] {
        return Err(Error::invalid(
            "normalize",
            format!(
                "batch {s:?} with {} means and {} stds",
                mean.len(),
                std.len()
            ),
        ));
    }
    if std.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(
            "normalize",
            "standard deviations must be positive",
        ));
    }
    let (ch, plane) = (s[1], s[2] * s[3]);
    let mut out = batch.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % ch;
        *v = (*v - mean[c]) / std[c];
    }
    Ok(out)
}

/// Zero-pad, random crop, optional random horizontal flip, then normalize.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::invalid(
            "augment",
            format!("batch must be rank 4, got {s:?}"),
        ));
    }
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let crop = cfg.crop.unwrap_or(h);
    if crop > h + 2 * cfg.pad || crop > w + 2 * cfg.pad {
        return Err(Error::invalid(
            "augment",
            format!(
                "crop {crop} larger than padded image {}x{}",
                h + 2 * cfg.pad,
                w + 2 * cfg.pad
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = batch.data();
    let mut out = Vec::with_capacity(b * ch * crop * crop);
    for n in 0..b {
        let oy = rng.gen_range(0..=h + 2 * cfg.pad - crop);
        let ox = rng.gen_range(0..=w + 2 * cfg.pad - crop);
        let flip = cfg.flip && rng.gen_bool(0.5);
        for c in 0..ch {
            let base = (n * ch + c) * h * w;
            for y in 0..crop {
                for x in 0..crop {
                    let xx = if flip { crop - 1 - x } else { x };
                    let sy = (oy + y) as isize - cfg.pad as isize;
                    let sx = (ox + xx) as isize - cfg.pad as isize;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    out.push(if inside {
                        src[base + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    let t = Tensor::new(vec![b, ch, crop, crop], out)?;
    normalize(&t, &cfg.mean, &cfg.std)
}

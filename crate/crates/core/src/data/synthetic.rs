use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale images of oriented sinusoidal gratings, one orientation per class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_per_class: usize,
    /// Image side length.
    pub size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub const DEFAULT_NOISE: f64 = 0.5;

    pub fn new(classes: usize, n_per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            n_per_class,
            size,
            noise: Self::DEFAULT_NOISE,
            seed,
        }
    }
}

fn pattern(c: usize, classes: usize, size: usize) -> Vec<f64> {
    let theta = PI * c as f64 / classes as f64;
    let (s, co) = theta.sin_cos();
    let freq = 2.0 * PI * 1.5 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push((freq * (x as f64 * co + y as f64 * s)).sin());
        }
    }
    out
}

/// Rows are grouped by class, `n_per_class` each.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledImageSet> {
    if spec.classes < 2 || spec.size == 0 || !(spec.noise >= 0.0) {
        return Err(Error::invalid(
            "make_synthetic",
            format!("bad spec {spec:?}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let px = spec.size * spec.size;
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let base = pattern(c, spec.classes, spec.size);
        for _ in 0..spec.n_per_class {
            if spec.noise == 0.0 {
                data.extend_from_slice(&base);
            } else {
                data.extend(base.iter().map(|&b| b + normal.sample(&mut rng)));
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, 1, spec.size, spec.size], data)?;
    LabeledImageSet::new(images, labels, spec.classes)
}

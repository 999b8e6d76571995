use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    /// Uniform over all rows.
    Instance,
    /// Uniform over classes, then uniform within the class.
    ClassBalanced,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Instance => "instance",
            SamplerKind::ClassBalanced => "class-balanced",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(SamplerKind::Instance),
            "class-balanced" => Ok(SamplerKind::ClassBalanced),
            _ => Err(Error::invalid(
                "SamplerKind",
                format!("unknown sampler {s:?}"),
            )),
        }
    }
}

/// Draws batches i.i.d. with replacement.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    kind: SamplerKind,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(kind: SamplerKind, batch: usize, seed: u64) -> Self {
        Self {
            kind,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn sample_indices(&mut self, ds: &LabeledImageSet) -> Result<Vec<usize>> {
        if ds.is_empty() {
            return Err(Error::invalid("sample_batch", "empty dataset"));
        }
        match self.kind {
            SamplerKind::Instance => Ok((0..self.batch)
                .map(|_| self.rng.gen_range(0..ds.len()))
                .collect()),
            SamplerKind::ClassBalanced => {
                if let Some(c) = (0..ds.classes()).find(|&c| ds.class_indices(c).is_empty()) {
                    return Err(Error::InsufficientSamples {
                        class: c,
                        needed: 1,
                        available: 0,
                    });
                }
                Ok((0..self.batch)
                    .map(|_| {
                        let rows = ds.class_indices(self.rng.gen_range(0..ds.classes()));
                        rows[self.rng.gen_range(0..rows.len())]
                    })
                    .collect())
            }
        }
    }

    pub fn sample(&mut self, ds: &LabeledImageSet) -> Result<(Tensor, Vec<usize>)> {
        let rows = self.sample_indices(ds)?;
        Ok(ds.batch(&rows))
    }
}

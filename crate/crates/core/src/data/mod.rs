//! Labeled image sets: CIFAR-10 ingestion, a synthetic stand-in, long-tail
//! construction, stratified splitting, batch samplers and augmentation.

mod augment;
mod cifar;
mod longtail;
mod sampler;
mod synthetic;

pub use augment::{augment, channel_stats, normalize, AugmentConfig};
pub use cifar::{
    load_cifar10_dir, parse_cifar10_bin, write_cifar10_bin, CIFAR_CLASSES, CIFAR_RECORD, CIFAR_SIDE,
};
pub use longtail::{
    build_longtail, split_indices, split_train_val, LongTailManifest, LongTailSpec,
};
pub use sampler::{BatchSampler, SamplerKind};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, channels, H, W]` with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(
                "LabeledImageSet",
                format!("images must be rank 4, got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(
                "LabeledImageSet",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::invalid(
                    "LabeledImageSet",
                    format!("label {y} at row {i} outside [0, {classes})"),
                ));
            }
            by_class[y].push(i);
        }
        Ok(Self {
            images,
            labels,
            classes,
            by_class,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Row indices of class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    /// Rows in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self::new(self.images.gather_rows(rows), labels, self.classes)
            .expect("rows come from a valid set")
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }
}

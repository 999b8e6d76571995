use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Exponential class-size profile `n_c = floor(n₀ · ρ^(-c/(C-1)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub imbalance_ratio: f64,
    pub base_count: usize,
    pub classes: usize,
}

impl LongTailSpec {
    pub fn new(imbalance_ratio: f64, base_count: usize, classes: usize) -> Result<Self> {
        if !(imbalance_ratio >= 1.0) || !imbalance_ratio.is_finite() {
            return Err(Error::invalid(
                "LongTailSpec",
                format!("imbalance ratio {imbalance_ratio} must be >= 1"),
            ));
        }
        if classes < 2 || base_count == 0 {
            return Err(Error::invalid(
                "LongTailSpec",
                format!("need at least 2 classes and a positive base count, got C={classes}, n0={base_count}"),
            ));
        }
        Ok(Self {
            imbalance_ratio,
            base_count,
            classes,
        })
    }

    pub fn count(&self, c: usize) -> usize {
        let e = c as f64 / (self.classes - 1) as f64;
        // Dividing keeps exact powers exact (5000 / 100 is 50, not 49.99...).
        let v = self.base_count as f64 / self.imbalance_ratio.powf(e);
        (v * (1.0 + 1e-12)).floor() as usize
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.classes).map(|c| self.count(c)).collect()
    }
}

/// Which source rows each class retained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailManifest {
    pub imbalance_ratio: f64,
    pub base_count: usize,
    pub seed: u64,
    pub counts: Vec<usize>,
    /// `retained[c]` lists source row indices of class `c`, ascending.
    pub retained: Vec<Vec<usize>>,
}

impl LongTailManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Retained rows in ascending source order.
    pub fn rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.retained.iter().flatten().copied().collect();
        rows.sort_unstable();
        rows
    }
}

/// Keep the first `n_c` rows of each class after a seeded shuffle.
pub fn build_longtail(
    ds: &LabeledImageSet,
    spec: &LongTailSpec,
    seed: u64,
) -> Result<(LabeledImageSet, LongTailManifest)> {
    if spec.classes != ds.classes() {
        return Err(Error::invalid(
            "build_longtail",
            format!(
                "spec has {} classes, data has {}",
                spec.classes,
                ds.classes()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = spec.counts();
    let mut retained = Vec::with_capacity(spec.classes);
    for (c, &n) in counts.iter().enumerate() {
        let mut rows = ds.class_indices(c).to_vec();
        if rows.len() < n {
            return Err(Error::InsufficientSamples {
                class: c,
                needed: n,
                available: rows.len(),
            });
        }
        rows.shuffle(&mut rng);
        rows.truncate(n);
        rows.sort_unstable();
        retained.push(rows);
    }
    let manifest = LongTailManifest {
        imbalance_ratio: spec.imbalance_ratio,
        base_count: spec.base_count,
        seed,
        counts,
        retained,
    };
    Ok((ds.subset(&manifest.rows()), manifest))
}

/// Stratified split of row indices: per class `floor(n · (1 - fraction))` rows,
/// but at least one, go to validation and the rest to training. Both lists
/// come back ascending.
pub fn split_indices(
    ds: &LabeledImageSet,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "split_train_val",
            format!("fraction {fraction} outside (0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..ds.classes() {
        let mut rows = ds.class_indices(c).to_vec();
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples {
                class: c,
                needed: 2,
                available: rows.len(),
            });
        }
        rows.shuffle(&mut rng);
        let n_val = ((rows.len() as f64 * (1.0 - fraction) + 1e-9).floor() as usize).max(1);
        val.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val(
    ds: &LabeledImageSet,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train, val) = split_indices(ds, fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn labels_only(counts: &[usize]) -> LabeledImageSet {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        let n = labels.len();
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f64);
        LabeledImageSet::new(images, labels, counts.len()).unwrap()
    }

    #[test]
    fn cifar_profile_counts() {
        let spec = LongTailSpec::new(100.0, 5000, 10).unwrap();
        // Evaluated independently: floor(5000 / 100^(c/9)).
        assert_eq!(
            spec.counts(),
            vec![5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50]
        );
    }

    #[test]
    fn unit_ratio_is_balanced() {
        let spec = LongTailSpec::new(1.0, 37, 4).unwrap();
        assert_eq!(spec.counts(), vec![37; 4]);
        assert!(LongTailSpec::new(0.5, 10, 3).is_err());
        assert!(LongTailSpec::new(10.0, 10, 1).is_err());
    }

    #[test]
    fn retained_rows_and_manifest_are_stable() {
        let ds = labels_only(&[20, 20, 20]);
        let spec = LongTailSpec::new(4.0, 20, 3).unwrap();
        let (lt, m) = build_longtail(&ds, &spec, 3).unwrap();
        assert_eq!(lt.counts(), vec![20, 10, 5]);
        assert_eq!(m.counts, vec![20, 10, 5]);
        for (c, rows) in m.retained.iter().enumerate() {
            assert!(rows.iter().all(|&r| ds.labels()[r] == c));
        }
        let (_, again) = build_longtail(&ds, &spec, 3).unwrap();
        assert_eq!(m.to_json().unwrap(), again.to_json().unwrap());
        assert_eq!(
            LongTailManifest::from_json(&m.to_json().unwrap()).unwrap(),
            m
        );
        let (_, other) = build_longtail(&ds, &spec, 4).unwrap();
        assert_ne!(m.retained, other.retained);
    }

    #[test]
    fn shortage_names_the_class() {
        let ds = labels_only(&[20, 20, 3]);
        let spec = LongTailSpec::new(4.0, 20, 3).unwrap();
        match build_longtail(&ds, &spec, 0) {
            Err(Error::InsufficientSamples {
                class,
                needed,
                available,
            }) => assert_eq!((class, needed, available), (2, 5, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fifty_split_forty_ten() {
        let ds = labels_only(&[50, 7]);
        let (tr, va) = split_train_val(&ds, 0.8, 1).unwrap();
        assert_eq!(tr.counts(), vec![40, 6]);
        assert_eq!(va.counts(), vec![10, 1]);
        assert!(split_train_val(&labels_only(&[5, 1]), 0.8, 1).is_err());
        let (tr, va) = split_train_val(&labels_only(&[2, 4]), 0.8, 1).unwrap();
        assert_eq!((tr.counts(), va.counts()), (vec![1, 3], vec![1, 1]));
        assert!(split_train_val(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn split_of_cifar_profile_stays_within_one_sample() {
        let counts = LongTailSpec::new(100.0, 5000, 10).unwrap().counts();
        let ds = labels_only(&counts);
        let (_, va) = split_indices(&ds, 0.8, 2).unwrap();
        let val_counts = ds.subset(&va).counts();
        for (n, v) in counts.iter().zip(val_counts) {
            assert!((v as f64 - 0.2 * *n as f64).abs() <= 1.0, "{n} -> {v}");
        }
    }

    proptest! {
        #[test]
        fn split_partitions_rows(counts in prop::collection::vec(2usize..40, 2..6), seed in 0u64..1000) {
            let ds = labels_only(&counts);
            let (tr, va) = split_indices(&ds, 0.8, seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        }

        #[test]
        fn profile_is_monotone_with_bounded_ratio(rho in 1.0f64..200.0, n0 in 100usize..6000, c in 2usize..12) {
            let spec = LongTailSpec::new(rho, n0, c).unwrap();
            let counts = spec.counts();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            let last = *counts.last().unwrap();
            prop_assume!(last >= 3);
            let ratio = counts[0] as f64 / last as f64;
            let slack = 2.0 / last as f64;
            prop_assert!(ratio >= rho * (1.0 - slack) && ratio <= rho * (1.0 + slack));
        }
    }
}

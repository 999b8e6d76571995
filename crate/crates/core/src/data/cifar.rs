use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parse CIFAR-10 binary records; pixels are scaled to `[0, 1]`.
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<LabeledImageSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let record = bytes.len() / CIFAR_RECORD;
        return Err(Error::Parse {
            record,
            offset: record * CIFAR_RECORD,
            msg: format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD}",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Parse {
                record,
                offset: record * CIFAR_RECORD,
                msg: format!("label byte {label} outside 0..=9"),
            });
        }
        labels.push(label);
        pixels.extend(chunk[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    LabeledImageSet::new(images, labels, CIFAR_CLASSES)
}

/// Inverse of [`parse_cifar10_bin`]; pixels are rounded to the nearest byte.
pub fn write_cifar10_bin(ds: &LabeledImageSet) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || ds.classes() > CIFAR_CLASSES {
        return Err(Error::invalid(
            "write_cifar10_bin",
            format!(
                "need 3x32x32 images and at most 10 classes, got {:?}",
                ds.image_shape()
            ),
        ));
    }
    let plane = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &y) in ds.labels().iter().enumerate() {
        out.push(y as u8);
        let px = &ds.images().data()[i * plane..(i + 1) * plane];
        out.extend(
            px.iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

/// Read `data_batch_1.bin` .. `data_batch_5.bin` (training pool) and
/// `test_batch.bin` from a directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(path, e))
    };
    let mut train = Vec::new();
    for k in 1..=5 {
        train.extend(read(&format!("data_batch_{k}.bin"))?);
    }
    let test = read("test_batch.bin")?;
    Ok((parse_cifar10_bin(&train)?, parse_cifar10_bin(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record() {
        let ds = parse_cifar10_bin(&[0u8; CIFAR_RECORD]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[0]);
        assert!(ds.images().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_label_reports_record_and_offset() {
        let mut bytes = vec![0u8; 3 * CIFAR_RECORD];
        bytes[2 * CIFAR_RECORD] = 10;
        match parse_cifar10_bin(&bytes) {
            Err(Error::Parse { record, offset, .. }) => {
                assert_eq!(record, 2);
                assert_eq!(offset, 2 * CIFAR_RECORD);
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut one = vec![0u8; CIFAR_RECORD];
        one[0] = 10;
        assert!(matches!(
            parse_cifar10_bin(&one),
            Err(Error::Parse {
                record: 0,
                offset: 0,
                ..
            })
        ));
    }

    #[test]
    fn truncated_buffer_is_rejected() {
        let bytes = vec![0u8; CIFAR_RECORD + 7];
        assert!(matches!(
            parse_cifar10_bin(&bytes),
            Err(Error::Parse {
                record: 1,
                offset: CIFAR_RECORD,
                ..
            })
        ));
    }

    #[test]
    fn plane_layout_by_hand() {
        // Record 1: label 7, red plane pixel (row 2, col 5) = 51, green (0, 0) = 255,
        // blue (31, 31) = 102.
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        let r1 = CIFAR_RECORD;
        bytes[r1] = 7;
        bytes[r1 + 1 + 2 * 32 + 5] = 51;
        bytes[r1 + 1 + 1024] = 255;
        bytes[r1 + 1 + 2048 + 31 * 32 + 31] = 102;
        let ds = parse_cifar10_bin(&bytes).unwrap();
        assert_eq!(ds.labels(), &[0, 7]);
        let im = ds.images();
        assert_eq!(im.at(&[1, 0, 2, 5]), 0.2);
        assert_eq!(im.at(&[1, 1, 0, 0]), 1.0);
        assert_eq!(im.at(&[1, 2, 31, 31]), 0.4);
        assert_eq!(im.at(&[1, 0, 5, 2]), 0.0);
        assert_eq!(write_cifar10_bin(&ds).unwrap(), bytes);
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = load_cifar10_dir(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

//! MNIST ingestion from IDX files, validation splitting and seeded batching.

use crate::glimpse::ImageGray;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: header promises {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bad dimensions: {0}")]
    Dimensions(String),
    #[error("label {label} at index {index} is not a digit class")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// Images with their class labels. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<ImageGray>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageGray>, labels: Vec<usize>) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits off the last `holdout` examples.
    pub fn split_tail(mut self, holdout: usize) -> (Self, Self) {
        let at = self.len().saturating_sub(holdout);
        let images = self.images.split_off(at);
        let labels = self.labels.split_off(at);
        (self, Self { images, labels })
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ImageGray>, DataError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Dimensions(format!("{rows}x{cols} images")));
    }
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() < expected {
        return Err(DataError::Truncated {
            expected: 16 + expected,
            found: bytes.len(),
        });
    }
    if body.len() > expected {
        return Err(DataError::Dimensions(format!(
            "{count} images of {rows}x{cols} need {expected} bytes, file body has {}",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(rows * cols)
        .map(|px| ImageGray::from_bytes(rows, cols, px).expect("bytes scale into [0, 1]"))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::Truncated {
            expected: 8 + count,
            found: bytes.len(),
        });
    }
    if body.len() > count {
        return Err(DataError::Dimensions(format!(
            "{count} labels declared, file body has {} bytes",
            body.len()
        )));
    }
    body.iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < NUM_CLASSES {
                Ok(label as usize)
            } else {
                Err(DataError::LabelOutOfRange { index, label })
            }
        })
        .collect()
}

pub fn load_idx_images(path: &Path) -> Result<Vec<ImageGray>, DataError> {
    parse_idx_images(&read_file(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    parse_idx_labels(&read_file(path)?)
}

/// Serializes images to IDX, quantizing pixels back to bytes.
pub fn encode_idx_images(images: &[ImageGray]) -> Result<Vec<u8>, DataError> {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if (img.height(), img.width()) != (rows, cols) {
            return Err(DataError::Dimensions("images of differing sizes".into()));
        }
        out.extend(img.pixels().data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

pub fn load_dataset(images: &Path, labels: &Path) -> Result<LabeledDataset, DataError> {
    LabeledDataset::new(load_idx_images(images)?, load_idx_labels(labels)?)
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Loads the official training set from a directory holding the standard file names.
pub fn load_mnist_train(dir: &Path) -> Result<LabeledDataset, DataError> {
    load_dataset(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
}

pub fn load_mnist_test(dir: &Path) -> Result<LabeledDataset, DataError> {
    load_dataset(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))
}

/// Index batches for one epoch. The permutation depends only on `(seed, epoch)`;
/// the last batch may be short.
pub fn batch_iterator(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn all_255_image_parses_to_ones() {
        let mut bytes = header(IMAGES_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat(255u8).take(784));
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 1);
        assert!(imgs[0].pixels().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn image_errors_are_distinct() {
        let mut bytes = header(LABELS_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat(0u8).take(784));
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(DataError::BadMagic { found: 0x801, .. })
        ));
        let mut bytes = header(IMAGES_MAGIC, &[2, 28, 28]);
        bytes.extend(std::iter::repeat(0u8).take(784));
        assert!(matches!(parse_idx_images(&bytes), Err(DataError::Truncated { .. })));
        let mut bytes = header(IMAGES_MAGIC, &[1, 28, 27]);
        bytes.extend(std::iter::repeat(0u8).take(784));
        assert!(matches!(parse_idx_images(&bytes), Err(DataError::Dimensions(_))));
        assert!(matches!(parse_idx_images(&[0, 0]), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn labels_in_order_and_range_checked() {
        let mut bytes = header(LABELS_MAGIC, &[10]);
        bytes.extend(0u8..10);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), (0..10).collect::<Vec<_>>());
        let mut bad = header(LABELS_MAGIC, &[2]);
        bad.extend([3u8, 12]);
        assert!(matches!(
            parse_idx_labels(&bad),
            Err(DataError::LabelOutOfRange { index: 1, label: 12 })
        ));
        let mut wrong = header(IMAGES_MAGIC, &[1]);
        wrong.push(0);
        assert!(matches!(parse_idx_labels(&wrong), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn batches_are_deterministic_and_partition() {
        let a = batch_iterator(47, 10, 3, 2);
        assert_eq!(a, batch_iterator(47, 10, 3, 2));
        assert_ne!(a, batch_iterator(47, 10, 3, 3));
        assert_eq!(a.len(), 5);
        assert_eq!(a.last().unwrap().len(), 7);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..47).collect::<Vec<_>>());

        let one = batch_iterator(12, 12, 0, 0);
        assert_eq!(one.len(), 1);
        assert_ne!(one[0], (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn split_tail_holds_out_last_examples() {
        let imgs: Vec<_> = (0..5)
            .map(|i| ImageGray::new(1, 1, vec![i as f64 / 10.0]).unwrap())
            .collect();
        let ds = LabeledDataset::new(imgs, vec![0, 1, 2, 3, 4]).unwrap();
        let (train, val) = ds.split_tail(2);
        assert_eq!(train.labels, vec![0, 1, 2]);
        assert_eq!(val.labels, vec![3, 4]);
        assert!(LabeledDataset::new(vec![], vec![1]).is_err());
    }
}

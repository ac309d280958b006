//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes (row-major 32x32 planes).

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::idx::checked_labels;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const RECORD: usize = 1 + 3 * SIDE * SIDE;

/// Decodes one batch file into HWC pixels in `[0, 1]` and labels.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: (bytes.len() / RECORD + 1) as u64 * RECORD as u64,
            actual: bytes.len() as u64,
        });
    }
    let raw_labels: Vec<u8> = bytes.chunks_exact(RECORD).map(|r| r[0]).collect();
    let labels = checked_labels(path, &raw_labels, 10)?;
    let plane = SIDE * SIDE;
    let mut images = Vec::with_capacity(labels.len() * 3 * plane);
    for rec in bytes.chunks_exact(RECORD) {
        let px = &rec[1..];
        for i in 0..plane {
            for c in 0..3 {
                images.push(px[c * plane + i] as f32 / 255.0);
            }
        }
    }
    Ok((images, labels))
}

/// Encodes HWC `u8` images in the batch format.
pub fn write_cifar_batch(path: &Path, pixels_hwc: &[u8], labels: &[u8]) -> Result<()> {
    let plane = SIDE * SIDE;
    if pixels_hwc.len() != labels.len() * 3 * plane {
        return Err(Error::shape("pixel count does not match label count"));
    }
    let mut out = Vec::with_capacity(labels.len() * RECORD);
    for (img, &label) in pixels_hwc.chunks_exact(3 * plane).zip(labels) {
        out.push(label);
        for c in 0..3 {
            out.extend((0..plane).map(|i| img[i * 3 + c]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Batch files of one split, under `dir` or its `cifar-10-batches-bin` subdirectory.
pub fn cifar_batch_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    let base = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    match split {
        Split::Train => (1..=5)
            .map(|i| base.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    }
}

/// Loads the train (five batches) or test split from `dir` or from its
/// `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in cifar_batch_files(dir, split) {
        let (im, lb) = read_cifar_batch(&path)?;
        images.extend(im);
        labels.extend(lb);
    }
    Dataset::new(images, labels, (SIDE, SIDE, 3), 10, split)
}

//! IDX files (the MNIST distribution format).
//!
//! Header: big-endian `u32` magic (`0x00000803` for `u8` rank-3 images,
//! `0x00000801` for `u8` rank-1 labels) followed by one big-endian `u32`
//! per dimension, then the raw bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn read_idx(path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_file(path)?;
    let header = 4 + 4 * rank;
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(header));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok((dims, bytes[header..expected].to_vec()))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (dims, data) = read_idx(path, IMAGES_MAGIC, 3)?;
    Ok((dims[0], dims[1], dims[2], data))
}

/// Returns raw labels; range checking is left to the caller.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    Ok(read_idx(path, LABELS_MAGIC, 1)?.1)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::shape("pixel count is not a multiple of the image size"));
    }
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [pixels.len() / (rows * cols), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path, &out)
}

/// Image and label file paths of one split.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

/// Loads one MNIST split from the four standard file names in `dir`.
/// Pixels are scaled to `[0, 1]`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images_path, labels_path) = mnist_paths(dir, split);
    let (count, rows, cols, pixels) = read_idx_images(&images_path)?;
    let raw = read_idx_labels(&labels_path)?;
    if raw.len() != count {
        return Err(Error::shape(format!(
            "{} holds {count} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            raw.len()
        )));
    }
    let labels = checked_labels(&labels_path, &raw, 10)?;
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(images, labels, (rows, cols, 1), 10, split)
}

pub(crate) fn checked_labels(path: &Path, raw: &[u8], classes: usize) -> Result<Vec<usize>> {
    raw.iter()
        .enumerate()
        .map(|(index, &l)| {
            if (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(Error::LabelOutOfRange {
                    path: path.to_path_buf(),
                    index,
                    label: l as usize,
                    classes,
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(dir: &Path, split: Split, n: usize) -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (ip, lp) = mnist_paths(dir, split);
        write_idx_images(&ip, 28, 28, &pixels).unwrap();
        write_idx_labels(&lp, &labels).unwrap();
        (pixels, labels)
    }

    #[test]
    fn roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (pixels, labels) = synthetic(dir.path(), Split::Train, 5);
        let (ip, lp) = mnist_paths(dir.path(), Split::Train);
        let (n, r, c, back) = read_idx_images(&ip).unwrap();
        assert_eq!((n, r, c), (5, 28, 28));
        assert_eq!(back, pixels);
        assert_eq!(read_idx_labels(&lp).unwrap(), labels);

        let ds = load_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!((ds.height, ds.width, ds.channels), (28, 28, 1));
        for (&p, &v) in pixels.iter().zip(&ds.images) {
            assert_eq!(v, p as f32 / 255.0);
        }
    }

    #[test]
    fn truncated_file_names_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        synthetic(dir.path(), Split::Test, 3);
        let (ip, _) = mnist_paths(dir.path(), Split::Test);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_mnist(dir.path(), Split::Test).unwrap_err();
        match &err {
            Error::Truncated {
                expected, actual, ..
            } => {
                assert_eq!(*expected, 16 + 3 * 784);
                assert_eq!(*actual, 16 + 3 * 784 - 10);
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("2368") && msg.contains("2358"), "{msg}");
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        synthetic(dir.path(), Split::Test, 2);
        let (ip, lp) = mnist_paths(dir.path(), Split::Test);
        // a label file where an image file is expected
        fs::copy(&lp, &ip).unwrap();
        assert!(matches!(
            load_mnist(dir.path(), Split::Test),
            Err(Error::BadMagic {
                expected: IMAGES_MAGIC,
                found: LABELS_MAGIC,
                ..
            })
        ));
    }

    #[test]
    fn label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        synthetic(dir.path(), Split::Train, 4);
        let (_, lp) = mnist_paths(dir.path(), Split::Train);
        write_idx_labels(&lp, &[1, 2, 12, 3]).unwrap();
        assert!(matches!(
            load_mnist(dir.path(), Split::Train),
            Err(Error::LabelOutOfRange {
                index: 2,
                label: 12,
                ..
            })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_mnist(dir.path(), Split::Train),
            Err(Error::Io { .. })
        ));
    }
}

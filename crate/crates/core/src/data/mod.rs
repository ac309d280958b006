//! Datasets, loaders, augmentation and preprocessing.

pub mod augment;
pub mod cifar;
pub mod idx;
pub mod preprocess;

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CapsuleShape, FeatureMap, FeatureMapShape};

pub use augment::{center_crop, crop, random_crop, shift_augment, shift_image};
pub use cifar::{cifar_batch_files, load_cifar10, read_cifar_batch, write_cifar_batch};
pub use idx::{load_mnist, mnist_paths, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use preprocess::{fit_zca, fit_zca_on_sample, gcn, GcnConfig, ZcaTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images stored `N x H x W x C`, row-major, plus one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        (height, width, channels): (usize, usize, usize),
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::shape(format!(
                "{} values for {} images of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel { label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            height,
            width,
            channels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` items (or all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Applies `f` to every image. `f` returns the new image and the new
    /// `(height, width, channels)` must be the same for all images.
    pub fn map_images(
        &self,
        dims: (usize, usize, usize),
        mut f: impl FnMut(&[f32]) -> Vec<f32>,
    ) -> Result<Dataset> {
        let mut images = Vec::with_capacity(self.len() * dims.0 * dims.1 * dims.2);
        for i in 0..self.len() {
            images.extend(f(self.image(i)));
        }
        Dataset::new(images, self.labels.clone(), dims, self.classes, self.split)
    }

    /// Network input geometry for one image: one channel whose capsule is
    /// `(1, 1, C)`, so the pixel channels form the capsule.
    pub fn input_shape(&self) -> FeatureMapShape {
        FeatureMapShape::new(
            1,
            1,
            self.height,
            self.width,
            CapsuleShape::new(1, 1, self.channels).expect("non-zero channels"),
        )
        .expect("non-zero extents")
    }

    /// Gathers `indices` into a network input batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (FeatureMap<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::lit(v as f64)));
        }
        let shape = self.input_shape().with_batch(indices.len());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (FeatureMap::new(shape, data).expect("sized from shape"), labels)
    }
}

/// Builds a network input batch from already transformed images.
pub fn images_to_batch<T: Scalar>(
    images: &[Vec<f32>],
    (height, width, channels): (usize, usize, usize),
) -> Result<FeatureMap<T>> {
    let shape = FeatureMapShape::new(
        images.len(),
        1,
        height,
        width,
        CapsuleShape::new(1, 1, channels)?,
    )?;
    let data = images
        .iter()
        .flat_map(|im| im.iter().map(|&v| T::lit(v as f64)))
        .collect();
    FeatureMap::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_layout_is_hwc_capsules() {
        let images: Vec<f32> = (0..2 * 2 * 2 * 3).map(|v| v as f32).collect();
        let ds = Dataset::new(images, vec![1, 0], (2, 2, 3), 2, Split::Train).unwrap();
        let (map, labels) = ds.batch::<f64>(&[1]);
        assert_eq!(labels, [0]);
        assert_eq!(map.shape().capsule, CapsuleShape::new(1, 1, 3).unwrap());
        assert_eq!(map.capsule(0, 0, 1, 0), &[18.0, 19.0, 20.0]);
    }

    #[test]
    fn dataset_checks() {
        assert!(Dataset::new(vec![0.0; 5], vec![0], (2, 2, 1), 10, Split::Test).is_err());
        assert!(matches!(
            Dataset::new(vec![0.0; 4], vec![10], (2, 2, 1), 10, Split::Test),
            Err(Error::InvalidLabel { label: 10, .. })
        ));
    }
}

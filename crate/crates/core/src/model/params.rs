//! Per-layer kernel tensors and their initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One tensor per layer, in declaration order, each shaped
/// `[kh, kw, in, out, g, n, p]`.
///
/// The same type carries weights, gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle<T> {
    pub kernels: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamBundle<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        ParamBundle {
            kernels: config
                .layers
                .iter()
                .map(|l| Tensor::zeros(l.kernel_shape().dims().to_vec()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamBundle {
            kernels: self
                .kernels
                .iter()
                .map(|k| Tensor::zeros(k.shape().to_vec()))
                .collect(),
        }
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.kernels.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every tensor has the extents `config` requires.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.kernels.len() != config.layers.len() {
            return Err(Error::shape(format!(
                "{} kernels for {} layers",
                self.kernels.len(),
                config.layers.len()
            )));
        }
        for (idx, (k, l)) in self.kernels.iter().zip(&config.layers).enumerate() {
            if k.shape() != l.kernel_shape().dims() {
                return Err(Error::shape(format!(
                    "layer {}: kernel extents {:?}, expected {:?}",
                    idx + 1,
                    k.shape(),
                    l.kernel_shape().dims()
                )));
            }
        }
        Ok(())
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.kernels
            .iter()
            .map(|k| k.frobenius_norm().as_f64())
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.layer_norms().iter().map(|n| n * n).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, alpha: T) {
        self.kernels.iter_mut().for_each(|k| k.scale(alpha));
    }

    /// All values in declaration order.
    pub fn flat(&self) -> Vec<T> {
        self.kernels
            .iter()
            .flat_map(|k| k.data().iter().copied())
            .collect()
    }
}

/// Draws every kernel element from `Normal(0, sqrt(2 / fan_in))` where
/// `fan_in = kh * kw * in * n` is the number of scalars feeding one output
/// scalar. Layers are drawn in order from a single stream seeded by `seed`.
pub fn msra_init<T: Scalar>(config: &ModelConfig, seed: u64) -> ParamBundle<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = config
        .layers
        .iter()
        .map(|layer| {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let dims = layer.kernel_shape().dims().to_vec();
            let len = dims.iter().product();
            let data = (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect();
            Tensor::new(dims, data).expect("sized from dims")
        })
        .collect();
    ParamBundle { kernels }
}

//! Global contrast normalization and ZCA whitening.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `X' = s (X - mean) / max(epsilon, sqrt(alpha + mean((X - mean)^2)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub s: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            s: 1.0,
            epsilon: 1e-9,
            alpha: 10.0,
        }
    }
}

/// Normalizes one image using only its own statistics.
pub fn gcn(image: &[f32], cfg: &GcnConfig) -> Vec<f32> {
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = (cfg.alpha + var).sqrt().max(cfg.epsilon);
    image
        .iter()
        .map(|&v| (cfg.s * (v as f64 - mean) / denom) as f32)
        .collect()
}

/// Regularizer added to the square-rooted eigenvalues.
pub const ZCA_REGULARIZER: f64 = 0.1;

/// `y = W (x - mean)` with `W = U diag(1 / (sqrt(S) + 0.1)) U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `dim x dim`, row-major, symmetric.
    pub matrix: Vec<f64>,
}

const ZCA_MAGIC: &[u8; 8] = b"PCAPSZCA";

/// Fits the whitening transform on `count` rows of `dim` values.
pub fn fit_zca(samples: &[f32], dim: usize) -> Result<ZcaTransform> {
    if dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
        return Err(Error::shape(format!(
            "{} values cannot be split into rows of {dim}",
            samples.len()
        )));
    }
    let count = samples.len() / dim;
    let mut mean = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let centered: Vec<f64> = samples
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v as f64 - m))
        .collect();
    let mut cov = vec![0.0f64; dim * dim];
    // cov = X^T X / count, X is count x dim
    f64::gemm(
        dim,
        count,
        dim,
        1.0 / count as f64,
        &centered,
        (1, dim),
        &centered,
        (dim, 1),
        0.0,
        &mut cov,
        (dim, 1),
    );
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("covariance has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov));
    let u = &eig.eigenvectors;
    let scale: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&s| 1.0 / (s.max(0.0).sqrt() + ZCA_REGULARIZER))
        .collect();
    // W = (U diag(scale)) U^T
    let mut us = vec![0.0f64; dim * dim];
    for r in 0..dim {
        for c in 0..dim {
            us[r * dim + c] = u[(r, c)] * scale[c];
        }
    }
    let ut: Vec<f64> = (0..dim * dim).map(|i| u[(i % dim, i / dim)]).collect();
    let mut w = vec![0.0f64; dim * dim];
    f64::gemm(dim, dim, dim, 1.0, &us, (dim, 1), &ut, (dim, 1), 0.0, &mut w, (dim, 1));
    for r in 0..dim {
        for c in r + 1..dim {
            let avg = 0.5 * (w[r * dim + c] + w[c * dim + r]);
            w[r * dim + c] = avg;
            w[c * dim + r] = avg;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("whitening matrix has non-finite entries".into()));
    }
    Ok(ZcaTransform {
        dim,
        mean,
        matrix: w,
    })
}

/// Fits on `count` images drawn without replacement from `dataset`.
pub fn fit_zca_on_sample<R: Rng + ?Sized>(
    dataset: &Dataset,
    count: usize,
    rng: &mut R,
) -> Result<ZcaTransform> {
    let count = count.min(dataset.len());
    let mut picks = sample(rng, dataset.len(), count).into_vec();
    picks.sort_unstable();
    let rows: Vec<f32> = picks
        .iter()
        .flat_map(|&i| dataset.image(i).iter().copied())
        .collect();
    fit_zca(&rows, dataset.image_len())
}

impl ZcaTransform {
    pub fn apply(&self, image: &[f32]) -> Vec<f32> {
        self.apply_rows(image)
    }

    /// Whitens every `dim`-sized row of `rows`.
    pub fn apply_rows(&self, rows: &[f32]) -> Vec<f32> {
        let d = self.dim;
        let count = rows.len() / d;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(256 * d) {
            let n = chunk.len() / d;
            let centered: Vec<f64> = chunk
                .chunks_exact(d)
                .flat_map(|r| r.iter().zip(&self.mean).map(|(&v, &m)| v as f64 - m))
                .collect();
            let mut y = vec![0.0f64; n * d];
            // Y = Xc W^T = Xc W
            f64::gemm(n, d, d, 1.0, &centered, (d, 1), &self.matrix, (1, d), 0.0, &mut y, (d, 1));
            out.extend(y.iter().map(|&v| v as f32));
        }
        debug_assert_eq!(out.len(), count * d);
        out
    }

    pub fn apply_dataset(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.image_len() != self.dim {
            return Err(Error::shape(format!(
                "transform of dimension {} applied to {}-value images",
                self.dim,
                dataset.image_len()
            )));
        }
        Dataset::new(
            self.apply_rows(&dataset.images),
            dataset.labels.clone(),
            (dataset.height, dataset.width, dataset.channels),
            dataset.classes,
            dataset.split,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ZCA_MAGIC.to_vec();
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for &v in self.mean.iter().chain(&self.matrix) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("whitening file: {m}"));
        if bytes.len() < 16 || &bytes[..8] != ZCA_MAGIC {
            return Err(bad("bad header"));
        }
        let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let want = dim
            .checked_mul(dim)
            .and_then(|d2| d2.checked_add(dim))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("dimension overflow"))?;
        if bytes.len() - 16 != want {
            return Err(bad(&format!("expected {} bytes, found {}", want + 16, bytes.len())));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(ZcaTransform {
            dim,
            mean: values[..dim].to_vec(),
            matrix: values[dim..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gcn_constant_image_is_zero() {
        assert!(gcn(&[0.3; 12], &GcnConfig::default()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_two_valued_image() {
        // half 0.2, half 0.8: mean 0.5, per-element variance 0.09
        let im: Vec<f32> = (0..12).map(|i| if i % 2 == 0 { 0.2 } else { 0.8 }).collect();
        let out = gcn(&im, &GcnConfig::default());
        let denom = (10.0f64 + 0.09).sqrt();
        for (&o, &x) in out.iter().zip(&im) {
            assert!((o as f64 - (x as f64 - 0.5) / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn gcn_shift_invariant() {
        let im: Vec<f32> = (0..27).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let shifted: Vec<f32> = im.iter().map(|v| v + 0.25).collect();
        let cfg = GcnConfig::default();
        for (a, b) in gcn(&im, &cfg).iter().zip(gcn(&shifted, &cfg)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zca_diagonal_covariance_closed_form() {
        // samples +-a e_i give covariance exactly diag(sigma^2)
        let sigma = [0.5f64, 1.0, 2.0, 3.0];
        let d = sigma.len();
        let n = 2 * d;
        let mut rows = vec![0.0f32; n * d];
        for (i, &s) in sigma.iter().enumerate() {
            let a = (s * (n as f64 / 2.0).sqrt()) as f32;
            rows[(2 * i) * d + i] = a;
            rows[(2 * i + 1) * d + i] = -a;
        }
        let t = fit_zca(&rows, d).unwrap();
        for r in 0..d {
            for c in 0..d {
                let want = if r == c { 1.0 / (sigma[r] + 0.1) } else { 0.0 };
                assert!((t.matrix[r * d + c] - want).abs() < 1e-6, "{r},{c}");
            }
        }
    }

    fn random_fit(d: usize, n: usize) -> (ZcaTransform, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (fit_zca(&rows, d).unwrap(), rows)
    }

    #[test]
    fn zca_symmetric_and_centers_mean() {
        let (t, _) = random_fit(12, 50);
        for r in 0..12 {
            for c in 0..12 {
                assert!((t.matrix[r * 12 + c] - t.matrix[c * 12 + r]).abs() < 1e-8);
            }
        }
        let mean: Vec<f32> = t.mean.iter().map(|&m| m as f32).collect();
        assert!(t.apply(&mean).iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn zca_affine_around_mean() {
        let (t, rows) = random_fit(8, 40);
        let (x, y) = (&rows[..8], &rows[8..16]);
        let (a, b) = (0.7f64, -0.4f64);
        let combo: Vec<f32> = (0..8)
            .map(|i| (a * x[i] as f64 + b * y[i] as f64 + (1.0 - a - b) * t.mean[i]) as f32)
            .collect();
        let (tx, ty, tc) = (t.apply(x), t.apply(y), t.apply(&combo));
        for i in 0..8 {
            let want = a * tx[i] as f64 + b * ty[i] as f64;
            assert!((tc[i] as f64 - want).abs() < 1e-4);
        }
    }

    #[test]
    fn zca_serialization_roundtrip() {
        let (t, _) = random_fit(5, 20);
        assert_eq!(ZcaTransform::from_bytes(&t.to_bytes()).unwrap(), t);
        let bytes = t.to_bytes();
        assert!(ZcaTransform::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zca_rejects_non_finite() {
        let rows = [1.0f32, f32::NAN, 0.0, 2.0];
        assert!(matches!(fit_zca(&rows, 2), Err(Error::Numeric(_))));
    }
}

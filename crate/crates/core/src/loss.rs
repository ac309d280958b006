//! Margin loss over class-capsule norms and the class readout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{frobenius_norm, FeatureMap};

/// Thresholds and negative-class weight of the margin loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl MarginLossConfig {
    pub const MNIST: MarginLossConfig = MarginLossConfig {
        m_plus: 0.5,
        m_minus: 0.1,
        lambda: 0.5,
    };

    pub const CIFAR: MarginLossConfig = MarginLossConfig {
        m_plus: 0.6,
        m_minus: 0.1,
        lambda: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.5..1.0).contains(&self.m_plus)
            && (0.0..0.5).contains(&self.m_minus)
            && self.m_plus > self.m_minus
            && self.lambda > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "margin loss needs m+ in [0.5,1), m- in [0,0.5), lambda > 0; got {self:?}"
            )))
        }
    }
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        Self::MNIST
    }
}

/// Images paired with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch<T> {
    pub images: FeatureMap<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(images: FeatureMap<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().batch != labels.len() {
            return Err(Error::shape(format!(
                "batch of {} images with {} labels",
                images.shape().batch,
                labels.len()
            )));
        }
        check_labels(&labels, classes)?;
        Ok(LabeledBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::InvalidLabel { label, classes }),
        None => Ok(()),
    }
}

/// Batch-mean margin loss and its gradient with respect to every norm.
///
/// `norms` is `batch x classes`, row-major.
pub fn margin_loss<T: Scalar>(
    norms: &[T],
    classes: usize,
    labels: &[usize],
    cfg: &MarginLossConfig,
) -> Result<(T, Vec<T>)> {
    if classes < 2 {
        return Err(Error::config("margin loss needs at least two classes"));
    }
    if norms.len() != labels.len() * classes {
        return Err(Error::shape(format!(
            "{} norms for {} samples of {classes} classes",
            norms.len(),
            labels.len()
        )));
    }
    check_labels(labels, classes)?;
    let per_sample = per_sample_margin_loss(norms, classes, labels, cfg);
    let batch = T::from_usize(labels.len()).unwrap();
    let loss = per_sample.iter().copied().sum::<T>() / batch;

    let (m_plus, m_minus, lambda) = (T::lit(cfg.m_plus), T::lit(cfg.m_minus), T::lit(cfg.lambda));
    let two = T::lit(2.0);
    let mut grad = vec![T::zero(); norms.len()];
    for (s, &label) in labels.iter().enumerate() {
        for k in 0..classes {
            let v = norms[s * classes + k];
            grad[s * classes + k] = if k == label {
                -two * (m_plus - v).max(T::zero())
            } else {
                two * lambda * (v - m_minus).max(T::zero())
            } / batch;
        }
    }
    Ok((loss, grad))
}

/// Unreduced loss per sample. Labels must already be validated.
pub fn per_sample_margin_loss<T: Scalar>(
    norms: &[T],
    classes: usize,
    labels: &[usize],
    cfg: &MarginLossConfig,
) -> Vec<T> {
    let (m_plus, m_minus, lambda) = (T::lit(cfg.m_plus), T::lit(cfg.m_minus), T::lit(cfg.lambda));
    labels
        .iter()
        .enumerate()
        .map(|(s, &label)| {
            (0..classes)
                .map(|k| {
                    let v = norms[s * classes + k];
                    if k == label {
                        let d = (m_plus - v).max(T::zero());
                        d * d
                    } else {
                        let d = (v - m_minus).max(T::zero());
                        lambda * d * d
                    }
                })
                .sum()
        })
        .collect()
}

/// Norm of each class capsule: `batch x channels`, row-major.
pub fn class_scores<T: Scalar>(final_map: &FeatureMap<T>) -> Result<Vec<T>> {
    let s = final_map.shape();
    if s.height != 1 || s.width != 1 {
        return Err(Error::shape(format!(
            "class readout needs 1x1 spatial extent, got {}x{}",
            s.height, s.width
        )));
    }
    Ok(final_map
        .data()
        .chunks_exact(s.capsule.len())
        .map(frobenius_norm)
        .collect())
}

/// Pulls `dL/dscore` back to the final map: `dL/dV = dL/dscore * V / |V|`.
pub fn class_scores_backward<T: Scalar>(
    final_map: &FeatureMap<T>,
    score_grad: &[T],
) -> Result<FeatureMap<T>> {
    let scores = class_scores(final_map)?;
    if scores.len() != score_grad.len() {
        return Err(Error::shape("score gradient does not match readout"));
    }
    let cap = final_map.shape().capsule.len();
    let mut grad = FeatureMap::zeros(*final_map.shape());
    for (((g, v), &norm), &d) in grad
        .data_mut()
        .chunks_exact_mut(cap)
        .zip(final_map.data().chunks_exact(cap))
        .zip(&scores)
        .zip(score_grad)
    {
        if norm > T::zero() {
            let k = d / norm;
            for (gi, &vi) in g.iter_mut().zip(v) {
                *gi = k * vi;
            }
        }
    }
    Ok(grad)
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// Predicted class for every row of a `batch x classes` score matrix.
pub fn predictions<T: Scalar>(scores: &[T], classes: usize) -> Vec<usize> {
    scores.chunks_exact(classes).map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{CapsuleShape, FeatureMapShape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfectly_separated_is_zero() {
        let mut norms = vec![0.0f64; 10];
        norms[4] = 1.0;
        let (loss, grad) = margin_loss(&norms, 10, &[4], &MarginLossConfig::MNIST).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn all_zero_norms() {
        let (loss, _) = margin_loss(&[0.0f64; 10], 10, &[2], &MarginLossConfig::MNIST).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_point_six() {
        let (loss, _) = margin_loss(&[0.6f64; 10], 10, &[7], &MarginLossConfig::MNIST).unwrap();
        assert!((loss - 1.125).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn batch_mean_reduction() {
        let mut norms = vec![0.0f64; 20];
        norms[3] = 1.0; // sample 0 perfect
        let (loss, _) = margin_loss(&norms, 10, &[3, 3], &MarginLossConfig::MNIST).unwrap();
        assert!((loss - 0.125).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let r = margin_loss(&[0.0f64; 10], 10, &[10], &MarginLossConfig::MNIST);
        assert!(matches!(r, Err(Error::InvalidLabel { label: 10, classes: 10 })));
    }

    #[test]
    fn config_validation() {
        assert!(MarginLossConfig::MNIST.validate().is_ok());
        assert!(MarginLossConfig::CIFAR.validate().is_ok());
        let bad = MarginLossConfig {
            m_plus: 0.4,
            ..MarginLossConfig::MNIST
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let classes = 10;
        let labels = [1, 5, 9];
        let norms: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let cfg = MarginLossConfig::MNIST;
        let (_, grad) = margin_loss(&norms, classes, &labels, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..norms.len() {
            let mut p = norms.clone();
            let mut m = norms.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (margin_loss(&p, classes, &labels, &cfg).unwrap().0
                - margin_loss(&m, classes, &labels, &cfg).unwrap().0)
                / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(err < 1e-6, "index {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    fn final_map(channels: usize, cap: CapsuleShape, data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(FeatureMapShape::new(1, channels, 1, 1, cap).unwrap(), data).unwrap()
    }

    #[test]
    fn readout_picks_hot_channel() {
        let cap = CapsuleShape::new(1, 16, 16).unwrap();
        let mut data = vec![0.0; 10 * 256];
        data[3 * 256..4 * 256].iter_mut().for_each(|x| *x = 1.0);
        let scores = class_scores(&final_map(10, cap, data)).unwrap();
        assert_eq!(argmax(&scores), 3);
        assert_eq!(scores[3], 16.0);
    }

    #[test]
    fn readout_ties_go_low() {
        let scores = class_scores(&final_map(10, CapsuleShape::SCALAR, vec![0.3; 10])).unwrap();
        assert_eq!(argmax(&scores), 0);
    }

    #[test]
    fn readout_matches_naive_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cap = CapsuleShape::new(2, 3, 2).unwrap();
        let data: Vec<f64> = (0..10 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores = class_scores(&final_map(10, cap, data.clone())).unwrap();
        for k in 0..10 {
            let mut acc = 0.0;
            for i in 0..12 {
                acc += data[k * 12 + i] * data[k * 12 + i];
            }
            assert!((scores[k] - acc.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn readout_rejects_spatial_maps() {
        let fm = FeatureMap::<f64>::zeros(FeatureMapShape::new(1, 10, 2, 1, CapsuleShape::SCALAR).unwrap());
        assert!(matches!(class_scores(&fm), Err(Error::Shape(_))));
    }

    #[test]
    fn readout_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cap = CapsuleShape::new(1, 2, 3).unwrap();
        let data: Vec<f64> = (0..4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = final_map(4, cap, data.clone());
        let g = class_scores_backward(&fm, &w).unwrap();
        let f = |d: &[f64]| -> f64 {
            let s = class_scores(&final_map(4, cap, d.to_vec())).unwrap();
            s.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        for i in 0..data.len() {
            let mut p = data.clone();
            let mut m = data.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            let a = g.data()[i];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_zero_iff_separated(
            norms in proptest::collection::vec(0.0f64..1.0, 10),
            label in 0usize..10,
        ) {
            let cfg = MarginLossConfig::MNIST;
            let (loss, _) = margin_loss(&norms, 10, &[label], &cfg).unwrap();
            prop_assert!(loss >= 0.0);
            let separated = norms.iter().enumerate().all(|(k, &v)| {
                if k == label { v >= cfg.m_plus } else { v <= cfg.m_minus }
            });
            prop_assert_eq!(loss == 0.0, separated);
        }

        #[test]
        fn argmax_scale_invariant(
            data in proptest::collection::vec(-1.0f64..1.0, 10 * 4),
            alpha in 0.01f64..100.0,
        ) {
            let cap = CapsuleShape::new(1, 2, 2).unwrap();
            let fm = final_map(10, cap, data.clone());
            let scaled = fm.map(|x| x * alpha);
            prop_assert_eq!(
                argmax(&class_scores(&fm).unwrap()),
                argmax(&class_scores(&scaled).unwrap())
            );
        }
    }
}

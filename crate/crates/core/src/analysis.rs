//! Diagnostics on trained models: filter correlation, generalization gap
//! and fast-gradient-sign attacks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::loss::predictions;
use crate::model::network::Network;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};
use crate::train::MetricLog;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(",")).expect("string write");
        }
        out
    }
}

/// One row per kernel tap `(j, k)`; the row holds every scalar of that tap
/// (`in * out * g * n * p` values) in storage order.
pub fn flatten_layer_filters<T: Scalar>(kernel: &Tensor<T>) -> Result<Matrix> {
    let s = kernel.shape();
    if s.len() != 7 {
        return Err(Error::shape(format!("expected a rank-7 kernel, got {s:?}")));
    }
    let rows = s[0] * s[1];
    let cols = kernel.len() / rows;
    Matrix::new(rows, cols, kernel.data().iter().map(|v| v.as_f64()).collect())
}

/// Pearson coefficients between the rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub matrix: Matrix,
    /// Rows whose values are all equal. Their off-diagonal coefficients are
    /// reported as 0 and their diagonal as 1.
    pub zero_variance: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn has_zero_variance(&self) -> bool {
        self.zero_variance.iter().any(|&z| z)
    }
}

pub fn correlation_matrix(m: &Matrix) -> Result<CorrelationMatrix> {
    if m.cols < 2 {
        return Err(Error::shape("correlation needs at least two columns"));
    }
    let n = m.cols as f64;
    let centered: Vec<Vec<f64>> = (0..m.rows)
        .map(|r| {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / n;
            row.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_variance: Vec<bool> = norms.iter().map(|&s| s == 0.0).collect();
    let mut data = vec![0.0; m.rows * m.rows];
    for a in 0..m.rows {
        data[a * m.rows + a] = 1.0;
        for b in a + 1..m.rows {
            let r = if zero_variance[a] || zero_variance[b] {
                0.0
            } else {
                let dot: f64 = centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            data[a * m.rows + b] = r;
            data[b * m.rows + a] = r;
        }
    }
    Ok(CorrelationMatrix {
        matrix: Matrix::new(m.rows, m.rows, data)?,
        zero_variance,
    })
}

/// Signed `train loss - test loss` at every test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub series: Vec<(usize, f64)>,
    /// Mean over the last `window` points.
    pub terminal_mean: f64,
    pub window: usize,
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,gap\n");
        for (i, g) in &self.series {
            writeln!(out, "{i},{g:?}").expect("string write");
        }
        out
    }
}

/// Train loss is linearly interpolated (and held constant past its ends)
/// at iterations where only a test value exists.
pub fn generalization_gap(log: &MetricLog, window: usize) -> Result<GapReport> {
    let train: Vec<(f64, f64)> = log
        .split(Split::Train)
        .map(|r| (r.iteration as f64, r.loss))
        .collect();
    let test: Vec<_> = log.split(Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("metric log needs both train and test records"));
    }
    let interp = |x: f64| -> f64 {
        if x <= train[0].0 {
            return train[0].1;
        }
        for w in train.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x <= x1 {
                return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
            }
        }
        train[train.len() - 1].1
    };
    let series: Vec<(usize, f64)> = test
        .iter()
        .map(|r| (r.iteration, interp(r.iteration as f64) - r.loss))
        .collect();
    let window = window.clamp(1, series.len());
    let tail = &series[series.len() - window..];
    let terminal_mean = tail.iter().map(|p| p.1).sum::<f64>() / window as f64;
    Ok(GapReport {
        series,
        terminal_mean,
        window,
    })
}

/// Outcome of one FGSM sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgsmReport {
    pub epsilon: f64,
    pub n: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
}

pub struct FgsmResult<T> {
    pub adversarial: FeatureMap<T>,
    pub report: FgsmReport,
}

/// Inputs are processed in slices of this many images.
const ATTACK_CHUNK: usize = 250;

/// White-box attack `x_adv = clip(x + epsilon * sign(dL/dx), lo, hi)` with
/// the gradient of the model's own margin loss. `epsilon = 0` returns the
/// input unchanged.
pub fn fgsm_attack<T: Scalar>(
    net: &Network<T>,
    images: &FeatureMap<T>,
    labels: &[usize],
    epsilon: f64,
    clip: Option<(f64, f64)>,
) -> Result<FgsmResult<T>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let n = images.shape().batch;
    if labels.len() != n || n == 0 {
        return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
    }
    let eps = T::lit(epsilon);
    let mut adversarial = Vec::with_capacity(images.data().len());
    let (mut clean, mut adv) = (0usize, 0usize);
    for start in (0..n).step_by(ATTACK_CHUNK) {
        let end = (start + ATTACK_CHUNK).min(n);
        let x = images.slice_batch(start, end)?;
        let y = &labels[start..end];
        let out = net.loss_and_gradients(&x, y)?;
        clean += count_correct(&out.scores, y, net.classes());
        let mut xa = x.clone();
        for (v, &g) in xa.data_mut().iter_mut().zip(out.gradients.input.data()) {
            let step = if g > T::zero() {
                eps
            } else if g < T::zero() {
                -eps
            } else {
                T::zero()
            };
            *v += step;
            if let Some((lo, hi)) = clip {
                *v = v.max(T::lit(lo)).min(T::lit(hi));
            }
        }
        adv += count_correct(&net.scores(&xa)?, y, net.classes());
        adversarial.extend_from_slice(xa.data());
    }
    Ok(FgsmResult {
        adversarial: FeatureMap::new(*images.shape(), adversarial)?,
        report: FgsmReport {
            epsilon,
            n,
            clean_accuracy: clean as f64 / n as f64,
            adversarial_accuracy: adv as f64 / n as f64,
        },
    })
}

fn count_correct<T: Scalar>(scores: &[T], labels: &[usize], classes: usize) -> usize {
    predictions(scores, classes)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Attack strengths swept by default.
pub const FGSM_EPSILONS: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::msra_init;
    use crate::model::presets::preset;
    use crate::train::MetricRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn p2_filter_matrices() {
        let c = preset("p2").unwrap();
        let p = msra_init::<f64>(&c, 0);
        let m1 = flatten_layer_filters(&p.kernels[0]).unwrap();
        assert_eq!((m1.rows, m1.cols), (9, 16));
        let m2 = flatten_layer_filters(&p.kernels[1]).unwrap();
        assert_eq!((m2.rows, m2.cols), (9, 32));
        assert_eq!(m2.data.len(), p.kernels[1].len());
        // row j*3+k holds tap (j, k)
        assert_eq!(m2.at(4, 0), p.kernels[1].at(&[1, 1, 0, 0, 0, 0, 0]));
    }

    #[test]
    fn one_by_one_kernel_is_one_row() {
        let k = Tensor::<f64>::filled(vec![1, 1, 2, 3, 1, 2, 2], 1.0);
        let m = flatten_layer_filters(&k).unwrap();
        assert_eq!((m.rows, m.cols), (1, 24));
    }

    #[test]
    fn identical_and_negated_rows() {
        let m = Matrix::new(3, 4, vec![1.0, 2.0, 4.0, 3.0, 1.0, 2.0, 4.0, 3.0, -1.0, -2.0, -4.0, -3.0])
            .unwrap();
        let c = correlation_matrix(&m).unwrap();
        assert!((c.matrix.at(0, 1) - 1.0).abs() < 1e-15);
        assert!((c.matrix.at(0, 2) + 1.0).abs() < 1e-15);
        assert!(!c.has_zero_variance());
    }

    #[test]
    fn zero_variance_row_flagged() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        let c = correlation_matrix(&m).unwrap();
        assert_eq!(c.zero_variance, [false, true]);
        assert_eq!(c.matrix.at(0, 1), 0.0);
        assert_eq!(c.matrix.at(1, 1), 1.0);
    }

    /// Single-pass sum formula, independent of the centered two-pass route.
    fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn random_matrix_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..9 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Matrix::new(9, 16, data).unwrap();
        let c = correlation_matrix(&m).unwrap();
        for a in 0..9 {
            for b in 0..9 {
                let want = textbook_pearson(m.row(a), m.row(b));
                assert!((c.matrix.at(a, b) - want).abs() < 1e-12, "{a},{b}");
            }
        }
    }

    proptest! {
        #[test]
        fn correlation_invariants(data in proptest::collection::vec(-5.0f64..5.0, 4 * 6)) {
            let m = Matrix::new(4, 6, data).unwrap();
            let c = correlation_matrix(&m).unwrap();
            for a in 0..4 {
                prop_assert!((c.matrix.at(a, a) - 1.0).abs() < 1e-9);
                for b in 0..4 {
                    let v = c.matrix.at(a, b);
                    prop_assert!((-1.0..=1.0).contains(&v));
                    prop_assert_eq!(v, c.matrix.at(b, a));
                }
            }
        }

        #[test]
        fn flatten_preserves_count(kh in 1usize..4, kw in 1usize..4, i in 1usize..3, o in 1usize..3, n in 1usize..3, p in 1usize..3) {
            let k = Tensor::<f64>::zeros(vec![kh, kw, i, o, 1, n, p]);
            let m = flatten_layer_filters(&k).unwrap();
            prop_assert_eq!(m.rows * m.cols, k.len());
            prop_assert_eq!(m.rows, kh * kw);
        }
    }

    fn log_from(train: &[(usize, f64)], test: &[(usize, f64)]) -> MetricLog {
        let mut log = MetricLog::default();
        let rec = |(iteration, loss): (usize, f64), split| MetricRecord {
            iteration,
            split,
            loss,
            accuracy: 0.5,
            lr: 0.1,
        };
        for &t in train {
            log.push(rec(t, Split::Train)).unwrap();
        }
        for &t in test {
            log.push(rec(t, Split::Test)).unwrap();
        }
        log
    }

    #[test]
    fn gap_identical_series_is_zero() {
        let s = [(0, 1.0), (10, 0.5), (20, 0.25)];
        let g = generalization_gap(&log_from(&s, &s), 2).unwrap();
        assert!(g.series.iter().all(|p| p.1 == 0.0));
        assert_eq!(g.terminal_mean, 0.0);
    }

    #[test]
    fn gap_constant_offset_with_interpolation() {
        let train = [(0, 1.0), (20, 0.6)];
        let test = [(0, 1.3), (10, 1.1), (20, 0.9)];
        let g = generalization_gap(&log_from(&train, &test), 10).unwrap();
        for (_, v) in &g.series {
            assert!((v + 0.3).abs() < 1e-12);
        }
        assert!((g.terminal_mean + 0.3).abs() < 1e-12);
        assert_eq!(g.window, 3);
    }

    #[test]
    fn gap_empty_log_errors() {
        assert!(generalization_gap(&MetricLog::default(), 3).is_err());
    }

    fn toy_batch() -> (Network<f64>, FeatureMap<f64>, Vec<usize>) {
        let c = preset("toy").unwrap();
        let net = Network::new(c.clone(), msra_init(&c, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = c.input_shape.with_batch(6);
        let x = FeatureMap::new(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap();
        (net, x, vec![0, 1, 2, 0, 1, 2])
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let (net, x, y) = toy_batch();
        let r = fgsm_attack(&net, &x, &y, 0.0, Some((0.0, 1.0))).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.report.clean_accuracy, r.report.adversarial_accuracy);
    }

    #[test]
    fn fgsm_step_follows_gradient_sign() {
        let (net, x, y) = toy_batch();
        let eps = 0.05;
        let r = fgsm_attack(&net, &x, &y, eps, None).unwrap();
        let g = net.loss_and_gradients(&x, &y).unwrap().gradients.input;
        for ((&a, &b), &gi) in r.adversarial.data().iter().zip(x.data()).zip(g.data()) {
            let d = a - b;
            assert!(d.abs() <= eps + 1e-15);
            assert_eq!(d.signum() * gi.signum() >= 0.0, true);
            if gi != 0.0 {
                assert!((d.abs() - eps).abs() < 1e-12);
            }
        }
        let clipped = fgsm_attack(&net, &x, &y, 0.3, Some((0.0, 1.0))).unwrap();
        assert!(clipped.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fgsm_rejects_negative_epsilon() {
        let (net, x, y) = toy_batch();
        assert!(matches!(fgsm_attack(&net, &x, &y, -0.1, None), Err(Error::Config(_))));
    }
}

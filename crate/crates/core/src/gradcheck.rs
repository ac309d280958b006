//! Central finite-difference checks of every analytic backward pass.
//!
//! Each check builds a scalar loss `L`, perturbs one input at a time by
//! `+-h` and compares `(L(x+h) - L(x-h)) / 2h` with the analytic gradient
//! using `|a - b| / max(|a|, |b|, 1e-8)`.
//!
//! For the single-operator checks `L = <up, f(x)>` and the outputs are
//! differenced before contracting with `up`, which avoids cancelling two
//! large sums.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::activation::{
    leaky_relu_backward_inplace, leaky_relu_inplace, squash_backward_inplace, squash_inplace,
    LEAKY_SLOPE,
};
use crate::conv::CapsConvLayer;
use crate::error::Result;
use crate::loss::{margin_loss, MarginLossConfig};
use crate::model::config::ModelConfig;
use crate::model::network::Network;
use crate::model::params::msra_init;
use crate::tensor::{CapsuleShape, FeatureMap, FeatureMapShape, KernelShape, Tensor};

pub const STEP: f64 = 1e-5;
pub const COMPONENT_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn finish(name: &str, errors: impl IntoIterator<Item = f64>, tolerance: f64) -> GradCheck {
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for e in errors {
        checked += 1;
        worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    GradCheck {
        name: name.to_string(),
        checked,
        max_rel_err: worst,
        tolerance,
        passed: checked > 0 && worst < tolerance,
    }
}

/// Compares `analytic` with central differences of `loss` around `x`,
/// restricted to `indices`.
fn compare(
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    mut loss: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + STEP;
            let lp = loss(&probe);
            probe[i] = x[i] - STEP;
            let lm = loss(&probe);
            probe[i] = x[i];
            relative_error((lp - lm) / (2.0 * STEP), analytic[i])
        })
        .collect()
}

/// Central differences of `L = <up, f(x)>`.
fn compare_linear(
    x: &[f64],
    analytic: &[f64],
    up: &[f64],
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let fp = f(&probe);
            probe[i] = x[i] - STEP;
            let fm = f(&probe);
            probe[i] = x[i];
            let d: f64 = fp.iter().zip(&fm).zip(up).map(|((p, m), u)| (p - m) * u).sum();
            relative_error(d / (2.0 * STEP), analytic[i])
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `L = <up, conv(U; W)>` on a strided multi-slice capsule layer.
pub fn check_capsule_conv(seed: u64) -> Result<[GradCheck; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = KernelShape {
        kh: 3,
        kw: 2,
        in_channels: 2,
        out_channels: 3,
        capsule_in: CapsuleShape::new(2, 2, 3)?,
        p: 2,
    };
    let stride = 2;
    let in_shape = FeatureMapShape::new(2, 2, 7, 6, shape.capsule_in)?;
    let w = uniform(&mut rng, shape.param_count(), -1.0, 1.0);
    let u = uniform(&mut rng, in_shape.len(), -1.0, 1.0);
    let layer = CapsConvLayer::new(shape, stride, Tensor::new(shape.dims().to_vec(), w.clone())?)?;
    let input = FeatureMap::new(in_shape, u.clone())?;
    let out_shape = layer.infer_output_shape(&in_shape)?;
    let up = uniform(&mut rng, out_shape.len(), -1.0, 1.0);
    let grads = layer.backward(&input, &FeatureMap::new(out_shape, up.clone())?)?;

    let kernel_errs = compare_linear(&w, grads.wrt_kernel.data(), &up, |wp| {
        let l = CapsConvLayer::new(shape, stride, Tensor::new(shape.dims().to_vec(), wp.to_vec()).unwrap())
            .unwrap();
        l.forward(&input).unwrap().into_data()
    });
    let input_errs = compare_linear(&u, grads.wrt_input.data(), &up, |xp| {
        let x = FeatureMap::new(in_shape, xp.to_vec()).unwrap();
        layer.forward(&x).unwrap().into_data()
    });
    Ok([
        finish("capsule conv / kernel", kernel_errs, COMPONENT_TOLERANCE),
        finish("capsule conv / input", input_errs, COMPONENT_TOLERANCE),
    ])
}

/// `L = <up, squash(v)>` over capsules of mixed norm, including norms in
/// the series branch of the derivative.
pub fn check_squash(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 6;
    let mut v = Vec::new();
    for scale in [1e-3, 3e-3, 0.1, 1.0, 3.0, 10.0] {
        v.extend(uniform(&mut rng, cap, -scale, scale));
    }
    let up = uniform(&mut rng, v.len(), -1.0, 1.0);
    let mut g = up.clone();
    squash_backward_inplace(&v, &mut g, cap);
    let errs = compare_linear(&v, &g, &up, |x| {
        let mut y = x.to_vec();
        squash_inplace(&mut y, cap);
        y
    });
    finish("squash", errs, COMPONENT_TOLERANCE)
}

/// `L = <up, leaky(x)>` away from the kink.
pub fn check_leaky_relu(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = uniform(&mut rng, 64, -2.0, 2.0)
        .into_iter()
        .map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v })
        .collect();
    let up = uniform(&mut rng, x.len(), -1.0, 1.0);
    let mut g = up.clone();
    leaky_relu_backward_inplace(&x, &mut g, LEAKY_SLOPE);
    let errs = compare_linear(&x, &g, &up, |xp| {
        let mut y = xp.to_vec();
        leaky_relu_inplace(&mut y, LEAKY_SLOPE);
        y
    });
    finish("leaky relu", errs, COMPONENT_TOLERANCE)
}

/// Batch-mean margin loss with respect to the class norms, both presets.
pub fn check_margin_loss(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 10;
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..classes)).collect();
    let mut errs = Vec::new();
    for cfg in [MarginLossConfig::MNIST, MarginLossConfig::CIFAR] {
        let norms: Vec<f64> = uniform(&mut rng, labels.len() * classes, 0.0, 1.0)
            .into_iter()
            .map(|v| {
                // keep clear of the hinge points
                if (v - cfg.m_plus).abs() < 1e-3 || (v - cfg.m_minus).abs() < 1e-3 {
                    v + 0.01
                } else {
                    v
                }
            })
            .collect();
        let (_, grad) = margin_loss(&norms, classes, &labels, &cfg)?;
        errs.extend(compare(&norms, &grad, &all(norms.len()), |n| {
            margin_loss(n, classes, &labels, &cfg).unwrap().0
        }));
    }
    Ok(finish("margin loss", errs, COMPONENT_TOLERANCE))
}

/// Whole-network loss against every kernel element (or a random sample of
/// at most `max_per_layer` per layer) and every input element.
pub fn check_network(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    max_per_layer: Option<usize>,
) -> Result<[GradCheck; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(config.clone(), msra_init::<f64>(config, seed))?;
    let shape = config.input_shape.with_batch(batch);
    let x = uniform(&mut rng, shape.len(), 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..config.classes())).collect();
    let input = FeatureMap::new(shape, x.clone())?;
    let out = net.loss_and_gradients(&input, &labels)?;
    let params = net.params();

    let mut kernel_errs = Vec::new();
    for (li, k) in params.kernels.iter().enumerate() {
        let mut picks = match max_per_layer {
            Some(m) if m < k.len() => sample(&mut rng, k.len(), m).into_vec(),
            _ => all(k.len()),
        };
        picks.sort_unstable();
        let mut probe = net.clone();
        kernel_errs.extend(compare(
            k.data(),
            out.gradients.kernels.kernels[li].data(),
            &picks,
            |kp| {
                let mut p = params.clone();
                p.kernels[li].data_mut().copy_from_slice(kp);
                probe.set_params(p).unwrap();
                probe.loss(&input, &labels).unwrap()
            },
        ));
    }
    let input_picks = match max_per_layer {
        Some(m) if m < x.len() => {
            let mut p = sample(&mut rng, x.len(), m).into_vec();
            p.sort_unstable();
            p
        }
        _ => all(x.len()),
    };
    let input_errs = compare(&x, out.gradients.input.data(), &input_picks, |xp| {
        net.loss(&FeatureMap::new(shape, xp.to_vec()).unwrap(), &labels)
            .unwrap()
    });
    let name = &config.name;
    Ok([
        finish(&format!("network {name} / kernels"), kernel_errs, NETWORK_TOLERANCE),
        finish(&format!("network {name} / input"), input_errs, NETWORK_TOLERANCE),
    ])
}

/// Component checks followed by the whole-network check on `config`.
pub fn run_suite(
    config: &ModelConfig,
    seed: u64,
    max_per_layer: Option<usize>,
) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    out.extend(check_capsule_conv(seed)?);
    out.push(check_squash(seed));
    out.push(check_leaky_relu(seed));
    out.push(check_margin_loss(seed)?);
    out.extend(check_network(config, seed, 2, max_per_layer)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets::preset;

    #[test]
    fn suite_passes_on_toy() {
        for c in run_suite(&preset("toy").unwrap(), 3, None).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = [0.3, -0.2];
        let wrong = [1.0, 1.0];
        let errs = compare(&x, &wrong, &[0, 1], |v| v[0] * v[0] + v[1]);
        let c = finish("bad", errs, COMPONENT_TOLERANCE);
        assert!(!c.passed);
        assert!(c.max_rel_err > 0.3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}

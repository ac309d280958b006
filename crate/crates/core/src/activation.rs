//! Leaky ReLU and the capsule squash, with their exact backward passes.

use crate::scalar::Scalar;

/// Negative-side slope used after every capsule layer.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Norm floor applied in the squash denominator.
const NORM_FLOOR: f64 = 1e-12;

/// Below this norm the squash derivative uses its Taylor series.
const SERIES_RADIUS: f64 = 1e-2;

pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

/// Derivative at `x`; taken as 1 at exactly zero.
pub fn leaky_relu_grad<T: Scalar>(x: T, slope: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        slope
    }
}

pub fn leaky_relu_inplace<T: Scalar>(values: &mut [T], slope: T) {
    values.iter_mut().for_each(|x| *x = leaky_relu(*x, slope));
}

/// Multiplies `upstream` by the derivative evaluated at `pre` (the input of
/// the forward pass).
pub fn leaky_relu_backward_inplace<T: Scalar>(pre: &[T], upstream: &mut [T], slope: T) {
    for (g, &x) in upstream.iter_mut().zip(pre) {
        *g *= leaky_relu_grad(x, slope);
    }
}

/// `(1 - e^{-|v|}) v / |v|` for one capsule, written into `out`.
///
/// A zero capsule maps to zero.
pub fn squash_capsule<T: Scalar>(v: &[T], out: &mut [T]) {
    let r = crate::tensor::frobenius_norm(v);
    if r == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let scale = squash_gain(r) / r.max(T::lit(NORM_FLOOR));
    for (o, &x) in out.iter_mut().zip(v) {
        *o = scale * x;
    }
}

/// Vector-Jacobian product of [`squash_capsule`] at `v`.
///
/// With `h(r) = (1 - e^{-r}) / r` the Jacobian is `h I + (h'(r) / r) v v^T`,
/// which is symmetric, so the same expression serves both directions.
/// At `v = 0` the gradient is zero.
pub fn squash_capsule_backward<T: Scalar>(v: &[T], upstream: &[T], out: &mut [T]) {
    let r = crate::tensor::frobenius_norm(v);
    if r == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let rr = r.max(T::lit(NORM_FLOOR));
    let h = squash_gain(r) / rr;
    let dh = squash_gain_ratio_slope(r);
    let dot: T = v.iter().zip(upstream).map(|(&a, &b)| a * b).sum();
    let coeff = dh / rr * dot;
    for ((o, &x), &g) in out.iter_mut().zip(v).zip(upstream) {
        *o = h * g + coeff * x;
    }
}

/// Output norm `1 - e^{-r}`.
fn squash_gain<T: Scalar>(r: T) -> T {
    -(-r).exp_m1()
}

/// `d/dr [(1 - e^{-r}) / r]`.
fn squash_gain_ratio_slope<T: Scalar>(r: T) -> T {
    if r < T::lit(SERIES_RADIUS) {
        // -1/2 + r/3 - r^2/8 + r^3/30 - r^4/144
        let c = [-0.5, 1.0 / 3.0, -0.125, 1.0 / 30.0, -1.0 / 144.0];
        c.iter().rev().fold(T::zero(), |acc, &k| acc * r + T::lit(k))
    } else {
        let f = squash_gain(r);
        (r * (T::one() - f) - f) / (r * r)
    }
}

/// Applies [`squash_capsule`] to every `capsule_len`-sized run of `values`.
pub fn squash_inplace<T: Scalar>(values: &mut [T], capsule_len: usize) {
    let mut scratch = vec![T::zero(); capsule_len];
    for cap in values.chunks_exact_mut(capsule_len) {
        squash_capsule(cap, &mut scratch);
        cap.copy_from_slice(&scratch);
    }
}

/// Replaces `upstream` with the squash vector-Jacobian product at `pre`.
pub fn squash_backward_inplace<T: Scalar>(pre: &[T], upstream: &mut [T], capsule_len: usize) {
    let mut scratch = vec![T::zero(); capsule_len];
    for (v, g) in pre
        .chunks_exact(capsule_len)
        .zip(upstream.chunks_exact_mut(capsule_len))
    {
        squash_capsule_backward(v, g, &mut scratch);
        g.copy_from_slice(&scratch);
    }
}

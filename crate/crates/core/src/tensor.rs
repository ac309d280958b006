//! Dense storage, capsule geometry and the slice-wise capsule product.
//!
//! All tensors are row-major with the last axis fastest. A feature map is
//! laid out as `batch x channels x height x width x g x m x n`, so the
//! elements of one capsule are contiguous and reinterpreting capsule axes
//! never moves data.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rank-3 capsule geometry `(g, m, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CapsuleShape {
    pub g: usize,
    pub m: usize,
    pub n: usize,
}

impl CapsuleShape {
    pub const SCALAR: CapsuleShape = CapsuleShape { g: 1, m: 1, n: 1 };

    pub fn new(g: usize, m: usize, n: usize) -> Result<Self> {
        if g == 0 || m == 0 || n == 0 {
            return Err(Error::shape(format!(
                "capsule dims must be positive, got ({g},{m},{n})"
            )));
        }
        Ok(CapsuleShape { g, m, n })
    }

    pub fn len(&self) -> usize {
        self.g * self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for CapsuleShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}x{}x{})", self.g, self.m, self.n)
    }
}

/// Geometry of a batch of capsule feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMapShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub capsule: CapsuleShape,
}

impl FeatureMapShape {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        capsule: CapsuleShape,
    ) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "feature map extents must be positive, got {batch}x{channels}x{height}x{width}"
            )));
        }
        Ok(FeatureMapShape {
            batch,
            channels,
            height,
            width,
            capsule,
        })
    }

    /// Number of scalars in one batch item.
    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width * self.capsule.len()
    }

    pub fn len(&self) -> usize {
        self.batch * self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_batch(self, batch: usize) -> Self {
        FeatureMapShape { batch, ..self }
    }

    pub fn dims(&self) -> [usize; 7] {
        [
            self.batch,
            self.channels,
            self.height,
            self.width,
            self.capsule.g,
            self.capsule.m,
            self.capsule.n,
        ]
    }
}

impl fmt::Display for FeatureMapShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width, self.capsule
        )
    }
}

/// Geometry of a capsule convolution kernel.
///
/// The stored weight block has extents `kh x kw x in x out x g x n x p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelShape {
    pub kh: usize,
    pub kw: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub capsule_in: CapsuleShape,
    pub p: usize,
}

impl KernelShape {
    pub fn weight_capsule(&self) -> CapsuleShape {
        CapsuleShape {
            g: self.capsule_in.g,
            m: self.capsule_in.n,
            n: self.p,
        }
    }

    pub fn output_capsule(&self) -> CapsuleShape {
        CapsuleShape {
            g: self.capsule_in.g,
            m: self.capsule_in.m,
            n: self.p,
        }
    }

    pub fn dims(&self) -> [usize; 7] {
        [
            self.kh,
            self.kw,
            self.in_channels,
            self.out_channels,
            self.capsule_in.g,
            self.capsule_in.n,
            self.p,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.dims().iter().product()
    }
}

/// Contiguous row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius_norm(&self.data)
    }
}

/// Batch of capsule feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: FeatureMapShape,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(shape: FeatureMapShape, data: Vec<T>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape(format!(
                "feature map {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: FeatureMapShape) -> Self {
        FeatureMap {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: FeatureMapShape, value: T) -> Self {
        FeatureMap {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> &FeatureMapShape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[b * len..(b + 1) * len]
    }

    /// The capsule at (batch, channel, row, col).
    pub fn capsule(&self, b: usize, c: usize, y: usize, x: usize) -> &[T] {
        let s = &self.shape;
        let cap = s.capsule.len();
        let off = (((b * s.channels + c) * s.height + y) * s.width + x) * cap;
        &self.data[off..off + cap]
    }

    /// Copies batch items `start..end` into a new map.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.batch {
            return Err(Error::shape(format!(
                "batch range {start}..{end} invalid for batch {}",
                self.shape.batch
            )));
        }
        let len = self.shape.sample_len();
        FeatureMap::new(
            self.shape.with_batch(end - start),
            self.data[start * len..end * len].to_vec(),
        )
    }

    /// Reinterprets every capsule with a new `(g, m, n)` of equal element count.
    pub fn reshape_capsules(self, target: CapsuleShape) -> Result<Self> {
        let shape = reshape_capsules(&self.shape, target)?;
        Ok(FeatureMap {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Shape half of [`FeatureMap::reshape_capsules`].
pub fn reshape_capsules(shape: &FeatureMapShape, target: CapsuleShape) -> Result<FeatureMapShape> {
    if shape.capsule.len() != target.len() {
        return Err(Error::shape(format!(
            "cannot reshape capsule {} ({} elements) into {} ({} elements)",
            shape.capsule,
            shape.capsule.len(),
            target,
            target.len()
        )));
    }
    Ok(FeatureMapShape {
        capsule: target,
        ..*shape
    })
}

/// Slice-wise product of a `(g,m,n)` capsule with a `(g,n,p)` weight.
pub fn capsule_matmul<T: Scalar>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (us, ws) = (u.shape(), w.shape());
    if us.len() != 3 || ws.len() != 3 {
        return Err(Error::shape(format!(
            "capsule_matmul expects rank-3 operands, got {us:?} and {ws:?}"
        )));
    }
    let (g, m, n, p) = (us[0], us[1], us[2], ws[2]);
    if ws[0] != g || ws[1] != n {
        return Err(Error::shape(format!(
            "capsule_matmul: {us:?} x {ws:?} needs shared g and n"
        )));
    }
    let mut out = vec![T::zero(); g * m * p];
    capsule_matmul_acc(u.data(), w.data(), (g, m, n, p), &mut out);
    Tensor::new(vec![g, m, p], out)
}

/// `out += u x w` slice by slice on raw capsule storage.
pub(crate) fn capsule_matmul_acc<T: Scalar>(
    u: &[T],
    w: &[T],
    (g, m, n, p): (usize, usize, usize, usize),
    out: &mut [T],
) {
    for a in 0..g {
        let us = &u[a * m * n..(a + 1) * m * n];
        let ws = &w[a * n * p..(a + 1) * n * p];
        let os = &mut out[a * m * p..(a + 1) * m * p];
        for r in 0..m {
            for c in 0..n {
                let x = us[r * n + c];
                for q in 0..p {
                    os[r * p + q] += x * ws[c * p + q];
                }
            }
        }
    }
}

/// Square root of the sum of squares.
pub fn frobenius_norm<T: Scalar>(values: &[T]) -> T {
    values.iter().map(|&x| x * x).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cap(g: usize, m: usize, n: usize) -> CapsuleShape {
        CapsuleShape::new(g, m, n).unwrap()
    }

    fn map_with(capsule: CapsuleShape) -> FeatureMap<f64> {
        let shape = FeatureMapShape::new(2, 3, 2, 2, capsule).unwrap();
        let data = (0..shape.len()).map(|i| i as f64).collect();
        FeatureMap::new(shape, data).unwrap()
    }

    #[test]
    fn reshape_16_to_4x4() {
        let fm = map_with(cap(1, 1, 16));
        let before = fm.data().to_vec();
        let out = fm.reshape_capsules(cap(1, 4, 4)).unwrap();
        assert_eq!(out.shape().capsule, cap(1, 4, 4));
        assert_eq!(out.shape().channels, 3);
        assert_eq!(out.data(), &before[..]);
    }

    #[test]
    fn reshape_4x6_to_6x4() {
        let fm = map_with(cap(1, 4, 6));
        assert!(fm.reshape_capsules(cap(1, 6, 4)).is_ok());
    }

    #[test]
    fn reshape_count_mismatch_names_both_shapes() {
        let err = map_with(cap(1, 1, 16))
            .reshape_capsules(cap(1, 3, 5))
            .unwrap_err()
            .to_string();
        assert!(err.contains("(1x1x16)") && err.contains("(1x3x5)"), "{err}");
    }

    #[test]
    fn zero_capsule_dims_rejected() {
        assert!(CapsuleShape::new(0, 1, 1).is_err());
        assert!(FeatureMapShape::new(1, 0, 1, 1, CapsuleShape::SCALAR).is_err());
    }

    #[test]
    fn matmul_all_ones() {
        let u = Tensor::filled(vec![3, 3, 3], 1.0f64);
        let w = Tensor::filled(vec![3, 3, 3], 1.0f64);
        let v = capsule_matmul(&u, &w).unwrap();
        assert_eq!(v.shape(), &[3, 3, 3]);
        assert!(v.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn matmul_identity_slices() {
        let u = Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f64 - 4.5).collect()).unwrap();
        let mut w = Tensor::zeros(vec![2, 2, 2]);
        for a in 0..2 {
            for i in 0..2 {
                w.data_mut()[a * 4 + i * 2 + i] = 1.0;
            }
        }
        assert_eq!(capsule_matmul(&u, &w).unwrap(), u);
    }

    #[test]
    fn matmul_2x2_by_hand() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let u = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let v = capsule_matmul(&u, &w).unwrap();
        assert_eq!(v.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let u = Tensor::<f64>::zeros(vec![1, 2, 3]);
        let w = Tensor::<f64>::zeros(vec![1, 2, 2]);
        assert!(matches!(capsule_matmul(&u, &w), Err(Error::Shape(_))));
        let w = Tensor::<f64>::zeros(vec![2, 3, 2]);
        assert!(capsule_matmul(&u, &w).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(frobenius_norm(&[0.0f64; 8]), 0.0);
        assert_eq!(frobenius_norm(&[1.0f64; 16]), 4.0);
        let mut t = Tensor::<f64>::zeros(vec![1, 2, 2]);
        t.data_mut()[0] = 3.0;
        t.data_mut()[3] = 4.0;
        assert_eq!(t.frobenius_norm(), 5.0);
    }

    #[test]
    fn kernel_shape_counts() {
        let k = KernelShape {
            kh: 3,
            kw: 3,
            in_channels: 2,
            out_channels: 10,
            capsule_in: cap(1, 4, 8),
            p: 8,
        };
        assert_eq!(k.param_count(), 9 * 2 * 10 * 64);
        assert_eq!(k.output_capsule(), cap(1, 4, 8));
        assert_eq!(k.weight_capsule(), cap(1, 8, 8));
    }

    fn small_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
        let len: usize = shape.iter().product();
        proptest::collection::vec(-3.0f64..3.0, len)
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    }

    proptest! {
        #[test]
        fn reshape_inverse_is_identity(data in proptest::collection::vec(-1.0f64..1.0, 2 * 3 * 2 * 2 * 24)) {
            let shape = FeatureMapShape::new(2, 3, 2, 2, cap(1, 4, 6)).unwrap();
            let fm = FeatureMap::new(shape, data.clone()).unwrap();
            let back = fm.reshape_capsules(cap(2, 3, 4)).unwrap().reshape_capsules(cap(1, 4, 6)).unwrap();
            prop_assert_eq!(back.shape(), &shape);
            prop_assert_eq!(back.data(), &data[..]);
        }

        #[test]
        fn scalar_capsules_multiply(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let u = Tensor::new(vec![1, 1, 1], vec![x]).unwrap();
            let w = Tensor::new(vec![1, 1, 1], vec![y]).unwrap();
            prop_assert_eq!(capsule_matmul(&u, &w).unwrap().data()[0], x * y);
        }

        #[test]
        fn matmul_is_linear(
            u1 in small_tensor(vec![2, 3, 4]),
            u2 in small_tensor(vec![2, 3, 4]),
            w in small_tensor(vec![2, 4, 2]),
            alpha in -2.0f64..2.0,
        ) {
            let sum = Tensor::new(
                vec![2, 3, 4],
                u1.data().iter().zip(u2.data()).map(|(a, b)| a + b).collect(),
            ).unwrap();
            let lhs = capsule_matmul(&sum, &w).unwrap();
            let r1 = capsule_matmul(&u1, &w).unwrap();
            let r2 = capsule_matmul(&u2, &w).unwrap();
            for ((l, a), b) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
                prop_assert!((l - (a + b)).abs() <= 1e-12 * (1.0 + l.abs()));
            }
            let mut scaled = u1.clone();
            scaled.scale(alpha);
            let lhs = capsule_matmul(&scaled, &w).unwrap();
            for (l, a) in lhs.data().iter().zip(r1.data()) {
                prop_assert!((l - alpha * a).abs() <= 1e-12 * (1.0 + l.abs()));
            }
        }
    }
}

//! Capsule convolution: forward pass, analytic backward pass and shape
//! inference.
//!
//! One output capsule at `(o, y, x)` is
//!
//! ```text
//! V[o,y,x] = sum over i, j, k of  U[i, y*s + j, x*s + k] (x) W[j,k,i,o]
//! ```
//!
//! where `(x)` is the slice-wise product of a `(g,m,n)` input capsule with a
//! `(g,n,p)` weight capsule. Padding is never applied and the kernel is not
//! flipped (cross-correlation).
//!
//! The fast path lowers every slice `a` of the capsule to a GEMM: rows are
//! (output position, capsule row `r`), the reduction axis is
//! (kernel row, kernel col, input channel, capsule column `c`), and columns
//! are (output channel, `q`). The batch is cut into fixed chunks of
//! [`BATCH_CHUNK`] items which run in parallel; per-chunk kernel gradients are
//! merged in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    capsule_matmul_acc, CapsuleShape, FeatureMap, FeatureMapShape, KernelShape, Tensor,
};

/// Batch items per parallel work unit.
pub const BATCH_CHUNK: usize = 8;

/// A capsule convolution layer: kernel weights plus stride.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsConvLayer<T> {
    shape: KernelShape,
    stride: usize,
    kernel: Tensor<T>,
}

/// Gradients of a scalar loss with respect to a layer's input and kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients<T> {
    pub wrt_input: FeatureMap<T>,
    pub wrt_kernel: Tensor<T>,
}

impl<T: Scalar> CapsConvLayer<T> {
    pub fn new(shape: KernelShape, stride: usize, kernel: Tensor<T>) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        if kernel.shape() != shape.dims() {
            return Err(Error::shape(format!(
                "kernel extents {:?} do not match {:?}",
                kernel.shape(),
                shape.dims()
            )));
        }
        Ok(CapsConvLayer {
            shape,
            stride,
            kernel,
        })
    }

    pub fn zeros(shape: KernelShape, stride: usize) -> Result<Self> {
        Self::new(shape, stride, Tensor::zeros(shape.dims().to_vec()))
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor<T> {
        &mut self.kernel
    }

    pub fn kernel_shape(&self) -> &KernelShape {
        &self.shape
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn input_capsule(&self) -> CapsuleShape {
        self.shape.capsule_in
    }

    pub fn infer_output_shape(&self, input: &FeatureMapShape) -> Result<FeatureMapShape> {
        infer_output_shape(input, &self.shape, self.stride)
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let out_shape = self.infer_output_shape(input.shape())?;
        let geom = Geometry::new(input.shape(), &out_shape, &self.shape, self.stride);
        let packed = geom.pack_weights(self.kernel.data());

        let mut out = vec![T::zero(); out_shape.len()];
        let in_chunk = BATCH_CHUNK * geom.in_sample;
        let out_chunk = BATCH_CHUNK * geom.out_sample;
        input
            .data()
            .par_chunks(in_chunk)
            .zip(out.par_chunks_mut(out_chunk))
            .for_each(|(src, dst)| geom.forward_chunk(&packed, src, dst));
        FeatureMap::new(out_shape, out)
    }

    /// Exact gradients of the linear map given `upstream = dL/dV`.
    pub fn backward(
        &self,
        input: &FeatureMap<T>,
        upstream: &FeatureMap<T>,
    ) -> Result<ConvGradients<T>> {
        let out_shape = self.check_upstream(input.shape(), upstream.shape())?;
        let geom = Geometry::new(input.shape(), &out_shape, &self.shape, self.stride);
        let packed = geom.pack_weights(self.kernel.data());

        let mut wrt_input = vec![T::zero(); input.shape().len()];
        let in_chunk = BATCH_CHUNK * geom.in_sample;
        let out_chunk = BATCH_CHUNK * geom.out_sample;
        let partials: Vec<Vec<T>> = input
            .data()
            .par_chunks(in_chunk)
            .zip(upstream.data().par_chunks(out_chunk))
            .zip(wrt_input.par_chunks_mut(in_chunk))
            .map(|((src, up), du)| geom.backward_chunk(&packed, src, up, du))
            .collect();

        let mut packed_grad = vec![T::zero(); packed.len()];
        for part in &partials {
            for (acc, &v) in packed_grad.iter_mut().zip(part) {
                *acc += v;
            }
        }
        let wrt_kernel = Tensor::new(
            self.shape.dims().to_vec(),
            geom.unpack_weights(&packed_grad),
        )?;
        Ok(ConvGradients {
            wrt_input: FeatureMap::new(*input.shape(), wrt_input)?,
            wrt_kernel,
        })
    }

    /// Direct-loop forward built from per-capsule products. Slow; kept as a
    /// second route for cross-checking the GEMM lowering.
    pub fn forward_reference(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let out_shape = self.infer_output_shape(input.shape())?;
        let g = Geometry::new(input.shape(), &out_shape, &self.shape, self.stride);
        let mut out = FeatureMap::zeros(out_shape);
        let (in_cap, out_cap, w_cap) = (g.g * g.m * g.n, g.g * g.m * g.p, g.g * g.n * g.p);
        let w = self.kernel.data();
        let u = input.data();
        let v = out.data_mut();
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for y in 0..g.oh {
                    for x in 0..g.ow {
                        let vo = (((b * g.c_out + o) * g.oh + y) * g.ow + x) * out_cap;
                        for i in 0..g.c_in {
                            for j in 0..g.kh {
                                for k in 0..g.kw {
                                    let (yy, xx) = (y * g.stride + j, x * g.stride + k);
                                    let uo = (((b * g.c_in + i) * g.h + yy) * g.w + xx) * in_cap;
                                    let wo = (((j * g.kw + k) * g.c_in + i) * g.c_out + o) * w_cap;
                                    capsule_matmul_acc(
                                        &u[uo..uo + in_cap],
                                        &w[wo..wo + w_cap],
                                        (g.g, g.m, g.n, g.p),
                                        &mut v[vo..vo + out_cap],
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Direct-loop backward: per slice, `dU += dV W^T` and `dW += U^T dV`.
    pub fn backward_reference(
        &self,
        input: &FeatureMap<T>,
        upstream: &FeatureMap<T>,
    ) -> Result<ConvGradients<T>> {
        let out_shape = self.check_upstream(input.shape(), upstream.shape())?;
        let g = Geometry::new(input.shape(), &out_shape, &self.shape, self.stride);
        let (in_cap, out_cap, w_cap) = (g.g * g.m * g.n, g.g * g.m * g.p, g.g * g.n * g.p);
        let mut du = vec![T::zero(); input.shape().len()];
        let mut dw = vec![T::zero(); self.kernel.len()];
        let (u, w, dv) = (input.data(), self.kernel.data(), upstream.data());
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for y in 0..g.oh {
                    for x in 0..g.ow {
                        let vo = (((b * g.c_out + o) * g.oh + y) * g.ow + x) * out_cap;
                        for i in 0..g.c_in {
                            for j in 0..g.kh {
                                for k in 0..g.kw {
                                    let (yy, xx) = (y * g.stride + j, x * g.stride + k);
                                    let uo = (((b * g.c_in + i) * g.h + yy) * g.w + xx) * in_cap;
                                    let wo = (((j * g.kw + k) * g.c_in + i) * g.c_out + o) * w_cap;
                                    for a in 0..g.g {
                                        for r in 0..g.m {
                                            for c in 0..g.n {
                                                let ui = uo + (a * g.m + r) * g.n + c;
                                                let mut acc = T::zero();
                                                for q in 0..g.p {
                                                    let d = dv[vo + (a * g.m + r) * g.p + q];
                                                    let wi = wo + (a * g.n + c) * g.p + q;
                                                    acc += d * w[wi];
                                                    dw[wi] += u[ui] * d;
                                                }
                                                du[ui] += acc;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGradients {
            wrt_input: FeatureMap::new(*input.shape(), du)?,
            wrt_kernel: Tensor::new(self.shape.dims().to_vec(), dw)?,
        })
    }

    fn check_upstream(
        &self,
        input: &FeatureMapShape,
        upstream: &FeatureMapShape,
    ) -> Result<FeatureMapShape> {
        let out_shape = self.infer_output_shape(input)?;
        if *upstream != out_shape {
            return Err(Error::shape(format!(
                "upstream gradient {upstream} does not match forward output {out_shape}"
            )));
        }
        Ok(out_shape)
    }
}

/// Output geometry of a valid (unpadded) capsule convolution.
pub fn infer_output_shape(
    input: &FeatureMapShape,
    kernel: &KernelShape,
    stride: usize,
) -> Result<FeatureMapShape> {
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    if input.channels != kernel.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels, kernel.in_channels
        )));
    }
    if input.capsule.len() != kernel.capsule_in.len() {
        return Err(Error::shape(format!(
            "input capsule {} cannot be read as kernel capsule {}",
            input.capsule, kernel.capsule_in
        )));
    }
    if input.height < kernel.kh || input.width < kernel.kw {
        return Err(Error::shape(format!(
            "kernel {}x{} larger than input {}x{}",
            kernel.kh, kernel.kw, input.height, input.width
        )));
    }
    Ok(FeatureMapShape {
        batch: input.batch,
        channels: kernel.out_channels,
        height: (input.height - kernel.kh) / stride + 1,
        width: (input.width - kernel.kw) / stride + 1,
        capsule: kernel.output_capsule(),
    })
}

/// Flattened extents shared by the GEMM lowering and the loop reference.
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    g: usize,
    m: usize,
    n: usize,
    p: usize,
    in_sample: usize,
    out_sample: usize,
}

impl Geometry {
    fn new(
        input: &FeatureMapShape,
        output: &FeatureMapShape,
        kernel: &KernelShape,
        stride: usize,
    ) -> Self {
        let cap = kernel.capsule_in;
        Geometry {
            batch: input.batch,
            c_in: input.channels,
            h: input.height,
            w: input.width,
            c_out: output.channels,
            oh: output.height,
            ow: output.width,
            kh: kernel.kh,
            kw: kernel.kw,
            stride,
            g: cap.g,
            m: cap.m,
            n: cap.n,
            p: kernel.p,
            in_sample: input.sample_len(),
            out_sample: output.sample_len(),
        }
    }

    /// Rows of the lowered problem per batch item (and slice).
    fn rows(&self) -> usize {
        self.oh * self.ow * self.m
    }

    /// Reduction length.
    fn depth(&self) -> usize {
        self.kh * self.kw * self.c_in * self.n
    }

    fn cols(&self) -> usize {
        self.c_out * self.p
    }

    /// Reorders `kh x kw x in x out x g x n x p` into `g` row-major
    /// `depth x cols` matrices.
    fn pack_weights<T: Scalar>(&self, kernel: &[T]) -> Vec<T> {
        let (depth, cols) = (self.depth(), self.cols());
        let mut packed = vec![T::zero(); self.g * depth * cols];
        self.for_each_weight_block(|src, a, row, col| {
            let dst = a * depth * cols + row * cols + col;
            for q in 0..self.p {
                packed[dst + q] = kernel[src + q];
            }
        });
        packed
    }

    fn unpack_weights<T: Scalar>(&self, packed: &[T]) -> Vec<T> {
        let (depth, cols) = (self.depth(), self.cols());
        let mut kernel = vec![T::zero(); packed.len()];
        self.for_each_weight_block(|dst, a, row, col| {
            let src = a * depth * cols + row * cols + col;
            kernel[dst..dst + self.p].copy_from_slice(&packed[src..src + self.p]);
        });
        kernel
    }

    /// Visits each run of `p` contiguous kernel scalars with its offset in
    /// kernel storage and its (slice, row, col) position in packed storage.
    fn for_each_weight_block(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for j in 0..self.kh {
            for k in 0..self.kw {
                for i in 0..self.c_in {
                    for o in 0..self.c_out {
                        for a in 0..self.g {
                            for c in 0..self.n {
                                let src = (((((j * self.kw + k) * self.c_in + i) * self.c_out + o)
                                    * self.g
                                    + a)
                                    * self.n
                                    + c)
                                    * self.p;
                                let row = ((j * self.kw + k) * self.c_in + i) * self.n + c;
                                f(src, a, row, o * self.p);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fills `cols_buf` (samples*rows x depth) with the lowered input of slice `a`.
    fn im2col<T: Scalar>(&self, src: &[T], samples: usize, a: usize, cols_buf: &mut [T]) {
        let (depth, rows, n) = (self.depth(), self.rows(), self.n);
        let mn = self.m * n;
        let cap = self.g * mn;
        for s in 0..samples {
            let u = &src[s * self.in_sample..(s + 1) * self.in_sample];
            let base_row = s * rows;
            for y in 0..self.oh {
                for x in 0..self.ow {
                    let pos = y * self.ow + x;
                    for j in 0..self.kh {
                        let yy = y * self.stride + j;
                        for k in 0..self.kw {
                            let xx = x * self.stride + k;
                            for i in 0..self.c_in {
                                let uo = ((i * self.h + yy) * self.w + xx) * cap + a * mn;
                                let col = ((j * self.kw + k) * self.c_in + i) * n;
                                for r in 0..self.m {
                                    let dst = (base_row + pos * self.m + r) * depth + col;
                                    cols_buf[dst..dst + n]
                                        .copy_from_slice(&u[uo + r * n..uo + (r + 1) * n]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds lowered input gradients back into feature-map layout.
    fn col2im<T: Scalar>(&self, cols_buf: &[T], samples: usize, a: usize, dst: &mut [T]) {
        let (depth, rows, n) = (self.depth(), self.rows(), self.n);
        let mn = self.m * n;
        let cap = self.g * mn;
        for s in 0..samples {
            let du = &mut dst[s * self.in_sample..(s + 1) * self.in_sample];
            let base_row = s * rows;
            for y in 0..self.oh {
                for x in 0..self.ow {
                    let pos = y * self.ow + x;
                    for j in 0..self.kh {
                        let yy = y * self.stride + j;
                        for k in 0..self.kw {
                            let xx = x * self.stride + k;
                            for i in 0..self.c_in {
                                let uo = ((i * self.h + yy) * self.w + xx) * cap + a * mn;
                                let col = ((j * self.kw + k) * self.c_in + i) * n;
                                for r in 0..self.m {
                                    let srco = (base_row + pos * self.m + r) * depth + col;
                                    let d = &mut du[uo + r * n..uo + (r + 1) * n];
                                    for (t, &v) in d.iter_mut().zip(&cols_buf[srco..srco + n]) {
                                        *t += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Visits each run of `p` contiguous output scalars of slice `a` with its
    /// offset in the lowered matrix and in feature-map layout.
    fn for_each_output_run(&self, samples: usize, a: usize, mut f: impl FnMut(usize, usize)) {
        let (rows, cols, p) = (self.rows(), self.cols(), self.p);
        let mp = self.m * p;
        let cap = self.g * mp;
        let plane = self.oh * self.ow;
        for s in 0..samples {
            for o in 0..self.c_out {
                for pos in 0..plane {
                    let mo = s * self.out_sample + (o * plane + pos) * cap + a * mp;
                    for r in 0..self.m {
                        f((s * rows + pos * self.m + r) * cols + o * p, mo + r * p);
                    }
                }
            }
        }
    }

    fn samples_in(&self, chunk_len: usize) -> usize {
        chunk_len / self.in_sample
    }

    fn forward_chunk<T: Scalar>(&self, packed: &[T], src: &[T], dst: &mut [T]) {
        let samples = self.samples_in(src.len());
        let (depth, cols) = (self.depth(), self.cols());
        let rows = samples * self.rows();
        let mut lowered = vec![T::zero(); rows * depth];
        let mut result = vec![T::zero(); rows * cols];
        for a in 0..self.g {
            self.im2col(src, samples, a, &mut lowered);
            let w = &packed[a * depth * cols..(a + 1) * depth * cols];
            T::gemm(
                rows,
                depth,
                cols,
                T::one(),
                &lowered,
                (depth, 1),
                w,
                (cols, 1),
                T::zero(),
                &mut result,
                (cols, 1),
            );
            let p = self.p;
            self.for_each_output_run(samples, a, |ro, mo| {
                dst[mo..mo + p].copy_from_slice(&result[ro..ro + p]);
            });
        }
    }

    /// Returns this chunk's packed kernel gradient; input gradient is
    /// written into `du`.
    fn backward_chunk<T: Scalar>(&self, packed: &[T], src: &[T], up: &[T], du: &mut [T]) -> Vec<T> {
        let samples = self.samples_in(src.len());
        let (depth, cols) = (self.depth(), self.cols());
        let rows = samples * self.rows();
        let mut lowered = vec![T::zero(); rows * depth];
        let mut grad_out = vec![T::zero(); rows * cols];
        let mut grad_lowered = vec![T::zero(); rows * depth];
        let mut grad_w = vec![T::zero(); packed.len()];
        for a in 0..self.g {
            let p = self.p;
            self.for_each_output_run(samples, a, |ro, mo| {
                grad_out[ro..ro + p].copy_from_slice(&up[mo..mo + p]);
            });
            self.im2col(src, samples, a, &mut lowered);
            let range = a * depth * cols..(a + 1) * depth * cols;
            // dW_a = lowered^T * dV
            T::gemm(
                depth,
                rows,
                cols,
                T::one(),
                &lowered,
                (1, depth),
                &grad_out,
                (cols, 1),
                T::zero(),
                &mut grad_w[range.clone()],
                (cols, 1),
            );
            // dLowered = dV * W_a^T
            T::gemm(
                rows,
                cols,
                depth,
                T::one(),
                &grad_out,
                (cols, 1),
                &packed[range],
                (1, cols),
                T::zero(),
                &mut grad_lowered,
                (depth, 1),
            );
            self.col2im(&grad_lowered, samples, a, du);
        }
        grad_w
    }
}

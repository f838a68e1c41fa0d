//! Dense `f32` tensors and the forward numeric primitives used by the
//! residual blocks.
//!
//! Layout is always row-major with the last axis contiguous. Convolution is
//! cross-correlation (no kernel flip). Two convolution paths exist: a naive
//! nested-loop reference (`conv2d_direct`, the oracle) and an im2col + GEMM
//! path (`conv2d`, the production route); tests hold them within 1e-5 of
//! each other.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense n-dimensional array of `f32` with row-major layout.
///
/// Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "zero-sized dimension".into(),
            });
        }
        if data.len() != expected {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("data length {} != shape product {expected}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape of equal length.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("length {} cannot reshape", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|x| x * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }
}

// Elementwise kernels below split into fixed 64K chunks for rayon; each
// element is written by exactly one task, so threading never changes bits.
const ELEM_CHUNK: usize = 1 << 16;

fn elementwise_binary(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32 + Sync) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    if a.len() >= ELEM_CHUNK {
        out.par_chunks_mut(ELEM_CHUNK)
            .zip(a.par_chunks(ELEM_CHUNK).zip(b.par_chunks(ELEM_CHUNK)))
            .for_each(|(dst, (ca, cb))| {
                for ((o, x), y) in dst.iter_mut().zip(ca).zip(cb) {
                    *o = f(*x, *y);
                }
            });
    } else {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = f(*x, *y);
        }
    }
    out
}

/// Elementwise sum; shapes must match.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: elementwise_binary(&a.data, &b.data, |x, y| x + y),
    })
}

/// `acc += x`, elementwise. Shapes must already agree.
pub fn add_assign(acc: &mut Tensor, x: &Tensor) {
    debug_assert_eq!(acc.shape, x.shape);
    for (a, b) in acc.data.iter_mut().zip(&x.data) {
        *a += b;
    }
}

/// The weighted skip combination `tfd + w * ipd`.
pub fn weighted_sum(tfd: &Tensor, ipd: &Tensor, w: f32) -> Result<Tensor> {
    if tfd.shape != ipd.shape {
        return Err(Error::ShapeMismatch {
            op: "weighted skip add",
            lhs: tfd.shape.clone(),
            rhs: ipd.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: tfd.shape.clone(),
        data: elementwise_binary(&tfd.data, &ipd.data, |t, i| t + w * i),
    })
}

/// `relu(tfd + w * ipd)` in one pass; elementwise bits match applying the
/// two ops separately.
pub fn weighted_sum_relu(tfd: &Tensor, ipd: &Tensor, w: f32) -> Result<Tensor> {
    if tfd.shape != ipd.shape {
        return Err(Error::ShapeMismatch {
            op: "weighted skip add",
            lhs: tfd.shape.clone(),
            rhs: ipd.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: tfd.shape.clone(),
        data: elementwise_binary(&tfd.data, &ipd.data, |t, i| {
            let v = t + w * i;
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }),
    })
}

/// `relu(a + b)` in one pass.
pub fn add_relu(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: elementwise_binary(&a.data, &b.data, |x, y| {
            let v = x + y;
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }),
    })
}

/// Sum of `a[i] * b[i]` over all elements.
pub fn dot(a: &Tensor, b: &Tensor) -> f32 {
    debug_assert_eq!(a.shape, b.shape);
    dot_slices(&a.data, &b.data)
}

// ---------------------------------------------------------------------------
// GEMM kernels
// ---------------------------------------------------------------------------

// Row count below which parallelism costs more than it buys.
const PAR_ROWS: usize = 64;

// Accumulator lanes for dot products. Plain `acc += x*y` is a loop-carried
// chain the compiler must not reassociate, so it runs scalar; eight named
// accumulators map onto one SIMD register and the reduction order stays
// fixed (lane l sums every eighth element), keeping results bit-stable
// across runs and thread counts.
const LANES: usize = 8;

#[inline]
fn dot_slices(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let mut ia = a.chunks_exact(LANES);
    let mut ib = b.chunks_exact(LANES);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut sum = 0.0f32;
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        sum += x * y;
    }
    for v in acc {
        sum += v;
    }
    sum
}

/// `C[m×n] = A[m×k] · B[k×n]`, 2-D row-major.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, ka], &[kb, n]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let work = |(row_block, a_block): (&mut [f32], &[f32])| {
        for (c_row, a_row) in row_block.chunks_exact_mut(n).zip(a_block.chunks_exact(ka)) {
            for (aik, b_row) in a_row.iter().zip(b.data.chunks_exact(n)) {
                let aik = *aik;
                for (c, bv) in c_row.iter_mut().zip(b_row) {
                    *c += aik * bv;
                }
            }
        }
    };
    if m >= PAR_ROWS {
        // Fixed-size blocks: each output row is written by exactly one task
        // with a sequential k-loop, so results do not depend on scheduling.
        let rows_per_block = 16;
        out.par_chunks_mut(rows_per_block * n)
            .zip(a.data.par_chunks(rows_per_block * ka))
            .for_each(work);
    } else {
        work((&mut out[..], &a.data[..]));
    }
    Tensor::new(vec![m, n], out)
}

/// `C[m×n] = A[m×k] · B[n×k]ᵀ` — B is used transposed, which turns the
/// inner loop into a contiguous dot product for both operands.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, ka], &[n, kb]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let work = |(row_block, a_block): (&mut [f32], &[f32])| {
        for (c_row, a_row) in row_block.chunks_exact_mut(n).zip(a_block.chunks_exact(ka)) {
            for (c, b_row) in c_row.iter_mut().zip(b.data.chunks_exact(kb)) {
                *c = dot_slices(a_row, b_row);
            }
        }
    };
    if m >= PAR_ROWS {
        let rows_per_block = 16;
        out.par_chunks_mut(rows_per_block * n)
            .zip(a.data.par_chunks(rows_per_block * ka))
            .for_each(work);
    } else {
        work((&mut out[..], &a.data[..]));
    }
    Tensor::new(vec![m, n], out)
}

/// `C[k×n] = A[m×k]ᵀ · B[m×n]`.
///
/// Accumulates row-rank-1 updates. Parallel reduction uses a fixed number of
/// partials summed in index order, so the result is scheduling-independent.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[ma, k], &[mb, n]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::ShapeMismatch {
            op: "matmul_at",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    };
    if ma != mb {
        return Err(Error::ShapeMismatch {
            op: "matmul_at",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let accumulate = |a_rows: &[f32], b_rows: &[f32], out: &mut [f32]| {
        for (a_row, b_row) in a_rows.chunks_exact(k).zip(b_rows.chunks_exact(n)) {
            for (aik, c_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
                let aik = *aik;
                for (c, bv) in c_row.iter_mut().zip(b_row) {
                    *c += aik * bv;
                }
            }
        }
    };
    if ma >= PAR_ROWS {
        const PARTIALS: usize = 8;
        let rows_per = ma.div_ceil(PARTIALS);
        let partials: Vec<Vec<f32>> = (0..PARTIALS)
            .into_par_iter()
            .map(|p| {
                let lo = (p * rows_per).min(ma);
                let hi = ((p + 1) * rows_per).min(ma);
                let mut part = vec![0.0f32; k * n];
                accumulate(&a.data[lo * k..hi * k], &b.data[lo * n..hi * n], &mut part);
                part
            })
            .collect();
        let mut out = vec![0.0f32; k * n];
        for part in &partials {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
        Tensor::new(vec![k, n], out)
    } else {
        let mut out = vec![0.0f32; k * n];
        accumulate(&a.data, &b.data, &mut out);
        Tensor::new(vec![k, n], out)
    }
}

/// Transpose of a 2-D tensor.
pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = &a.shape[..] else {
        return Err(Error::InvalidShape {
            op: "transpose2d",
            shape: a.shape.clone(),
            reason: "expected 2-D".into(),
        });
    };
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`; pads symmetrically with the
    /// extra pixel on the bottom/right. Requires odd kernel sides.
    Same,
    /// No padding; output `floor((in - k) / stride) + 1`.
    Valid,
}

/// Spatial geometry resolved from input, kernel, stride and padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    match padding {
        Padding::Same => {
            if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
                return Err(Error::InvalidArgument {
                    op: "conv2d",
                    reason: format!("'same' padding requires odd kernel sides, got {kh}x{kw}"),
                });
            }
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeometry {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::InvalidArgument {
                    op: "conv2d",
                    reason: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                });
            }
            Ok(ConvGeometry {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
    }
}

fn conv_check(input: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (&[n, c, h, w], &[f, kc, kh, kw]) = (&input.shape[..], &kernel.shape[..]) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channel count",
            lhs: input.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    let _ = (f, kh, kw);
    Ok((n, c, h, w, kh, kw))
}

/// Reference convolution: plain nested loops over the definition of
/// cross-correlation. Slow; used as the oracle for the GEMM path.
pub fn conv2d_direct(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w, kh, kw) = conv_check(input, kernel)?;
    let f = kernel.shape[0];
    let geo = conv_geometry(h, w, kh, kw, stride, padding)?;
    let mut out = Tensor::zeros(&[n, f, geo.out_h, geo.out_w]);
    let out_plane = geo.out_h * geo.out_w;
    for img in 0..n {
        for fo in 0..f {
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride + i) as isize - geo.pad_top as isize;
                                let iw = (ow * stride + j) as isize - geo.pad_left as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                let xv = input.data
                                    [((img * c + ci) * h + ih as usize) * w + iw as usize];
                                let kv = kernel.data[((fo * c + ci) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data[(img * f + fo) * out_plane + oh * geo.out_w + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}

// Lowers one image to the patch matrix `[C*kh*kw, P]`: row = one kernel tap,
// column = one output position. For stride-1 taps the inner loop is a
// straight slice copy; everything stays L2-resident for the block sizes the
// models here use.
fn im2col_image(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geo: ConvGeometry,
    col: &mut [f32],
) {
    let plane = geo.out_h * geo.out_w;
    debug_assert_eq!(col.len(), c * kh * kw * plane);
    for ci in 0..c {
        let src_plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let dst = &mut col[((ci * kh + i) * kw + j) * plane..][..plane];
                for oh in 0..geo.out_h {
                    let ih = (oh * stride + i) as isize - geo.pad_top as isize;
                    let row = &mut dst[oh * geo.out_w..(oh + 1) * geo.out_w];
                    if ih < 0 || ih >= h as isize {
                        row.fill(0.0);
                        continue;
                    }
                    let src_row = &src_plane[ih as usize * w..(ih as usize + 1) * w];
                    if stride == 1 {
                        // iw = ow + j - pad_left: one contiguous window.
                        let shift = j as isize - geo.pad_left as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).max(0) as usize).min(geo.out_w);
                        row[..lo].fill(0.0);
                        row[hi..].fill(0.0);
                        if lo < hi {
                            let s = (lo as isize + shift) as usize;
                            row[lo..hi].copy_from_slice(&src_row[s..s + (hi - lo)]);
                        }
                    } else {
                        for (ow, slot) in row.iter_mut().enumerate() {
                            let iw = (ow * stride + j) as isize - geo.pad_left as isize;
                            *slot = if iw < 0 || iw >= w as isize {
                                0.0
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

// Inverse of `im2col_image`: scatter-adds tap-row gradients back onto one
// image's gradient grid.
fn col2im_image(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geo: ConvGeometry,
    gx: &mut [f32],
) {
    let plane = geo.out_h * geo.out_w;
    for ci in 0..c {
        let dst_plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let src = &col[((ci * kh + i) * kw + j) * plane..][..plane];
                for oh in 0..geo.out_h {
                    let ih = (oh * stride + i) as isize - geo.pad_top as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let row = &src[oh * geo.out_w..(oh + 1) * geo.out_w];
                    let dst_row =
                        &mut dst_plane[ih as usize * w..(ih as usize + 1) * w];
                    if stride == 1 {
                        let shift = j as isize - geo.pad_left as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).max(0) as usize).min(geo.out_w);
                        if lo < hi {
                            let s = (lo as isize + shift) as usize;
                            for (d, g) in dst_row[s..s + (hi - lo)].iter_mut().zip(&row[lo..hi])
                            {
                                *d += g;
                            }
                        }
                    } else {
                        for (ow, g) in row.iter().enumerate() {
                            let iw = (ow * stride + j) as isize - geo.pad_left as isize;
                            if iw >= 0 && iw < w as isize {
                                dst_row[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Production convolution: per-image im2col + GEMM, parallel over the
/// batch. Cross-correlation, identical semantics to [`conv2d_direct`].
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (n, c, h, w, kh, kw) = conv_check(input, kernel)?;
    let f = kernel.shape[0];
    let geo = conv_geometry(h, w, kh, kw, stride, padding)?;
    let plane = geo.out_h * geo.out_w;
    let ckk = c * kh * kw;
    let mut out = vec![0.0f32; n * f * plane];
    out.par_chunks_mut(f * plane).enumerate().for_each(|(img, dst)| {
        let x = &input.data[img * c * h * w..(img + 1) * c * h * w];
        let mut col;
        // 1x1 stride-1 kernels already have the input in patch layout.
        let col_ref: &[f32] = if kh == 1 && kw == 1 && stride == 1 {
            x
        } else {
            col = vec![0.0f32; ckk * plane];
            im2col_image(x, c, h, w, kh, kw, stride, geo, &mut col);
            &col
        };
        // out[f][p] = sum_k kmat[f][k] * col[k][p]
        for (fo, out_row) in dst.chunks_exact_mut(plane).enumerate() {
            let k_row = &kernel.data[fo * ckk..(fo + 1) * ckk];
            for (kv, col_row) in k_row.iter().zip(col_ref.chunks_exact(plane)) {
                let kv = *kv;
                for (o, cv) in out_row.iter_mut().zip(col_row) {
                    *o += kv * cv;
                }
            }
        }
    });
    Tensor::new(vec![n, f, geo.out_h, geo.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
///
/// Kernel gradients accumulate over the batch in fixed image order (a fixed
/// number of parallel partials, reduced sequentially), so results do not
/// depend on thread scheduling.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_grad_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (n, c, h, w, kh, kw) = conv_check(input, kernel)?;
    let f = kernel.shape[0];
    let geo = conv_geometry(h, w, kh, kw, stride, padding)?;
    let plane = geo.out_h * geo.out_w;
    let ckk = c * kh * kw;
    debug_assert_eq!(grad_out.shape(), &[n, f, geo.out_h, geo.out_w]);

    let mut grad_input = if need_grad_input {
        Some(vec![0.0f32; n * c * h * w])
    } else {
        None
    };
    const PARTIALS: usize = 8;
    let imgs_per = n.div_ceil(PARTIALS);

    let run_image = |img: usize, gx_img: Option<&mut [f32]>, gk: &mut [f32]| {
        let x = &input.data[img * c * h * w..(img + 1) * c * h * w];
        let g = &grad_out.data[img * f * plane..(img + 1) * f * plane];
        let trivial = kh == 1 && kw == 1 && stride == 1;
        let mut col;
        let col_ref: &[f32] = if trivial {
            x
        } else {
            col = vec![0.0f32; ckk * plane];
            im2col_image(x, c, h, w, kh, kw, stride, geo, &mut col);
            &col
        };
        // gk[f][k] += dot(g[f], col[k]) over output positions
        for (fo, gk_row) in gk.chunks_exact_mut(ckk).enumerate() {
            let g_row = &g[fo * plane..(fo + 1) * plane];
            for (slot, col_row) in gk_row.iter_mut().zip(col_ref.chunks_exact(plane)) {
                *slot += dot_slices(g_row, col_row);
            }
        }
        if let Some(gx_img) = gx_img {
            // col_grad[k][p] = sum_f kmat[f][k] * g[f][p], scattered back
            let mut col_grad = vec![0.0f32; ckk * plane];
            for (fo, g_row) in g.chunks_exact(plane).enumerate() {
                let k_row = &kernel.data[fo * ckk..(fo + 1) * ckk];
                for (kv, cg_row) in k_row.iter().zip(col_grad.chunks_exact_mut(plane)) {
                    let kv = *kv;
                    for (o, gv) in cg_row.iter_mut().zip(g_row) {
                        *o += kv * gv;
                    }
                }
            }
            if trivial {
                gx_img.copy_from_slice(&col_grad);
            } else {
                col2im_image(&col_grad, c, h, w, kh, kw, stride, geo, gx_img);
            }
        }
    };

    let kernel_partials: Vec<Vec<f32>> = match &mut grad_input {
        Some(gx) => gx
            .par_chunks_mut(imgs_per * c * h * w)
            .enumerate()
            .map(|(chunk, gx_chunk)| {
                let mut gk = vec![0.0f32; f * ckk];
                let lo = chunk * imgs_per;
                let hi = ((chunk + 1) * imgs_per).min(n);
                for (offset, img) in (lo..hi).enumerate() {
                    let gx_img = &mut gx_chunk[offset * c * h * w..(offset + 1) * c * h * w];
                    run_image(img, Some(gx_img), &mut gk);
                }
                gk
            })
            .collect(),
        None => (0..PARTIALS)
            .into_par_iter()
            .map(|chunk| {
                let mut gk = vec![0.0f32; f * ckk];
                let lo = (chunk * imgs_per).min(n);
                let hi = ((chunk + 1) * imgs_per).min(n);
                for img in lo..hi {
                    run_image(img, None, &mut gk);
                }
                gk
            })
            .collect(),
    };
    let mut grad_kernel = vec![0.0f32; f * ckk];
    for part in &kernel_partials {
        for (acc, v) in grad_kernel.iter_mut().zip(part) {
            *acc += v;
        }
    }
    let grad_input = match grad_input {
        Some(gx) => Some(Tensor::new(input.shape().to_vec(), gx)?),
        None => None,
    };
    Ok((
        grad_input,
        Tensor::new(vec![f, c, kh, kw], grad_kernel)?,
    ))
}

// ---------------------------------------------------------------------------
// Pointwise and reduction primitives
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let mut out = vec![0.0f32; x.len()];
    if x.len() >= ELEM_CHUNK {
        out.par_chunks_mut(ELEM_CHUNK)
            .zip(x.data.par_chunks(ELEM_CHUNK))
            .for_each(|(dst, src)| {
                for (o, v) in dst.iter_mut().zip(src) {
                    *o = if *v > 0.0 { *v } else { 0.0 };
                }
            });
    } else {
        for (o, v) in out.iter_mut().zip(&x.data) {
            *o = if *v > 0.0 { *v } else { 0.0 };
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Upstream gradient masked by the sign of the forward input; the
/// subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: elementwise_binary(&x.data, &grad.data, |xv, gv| if xv > 0.0 { gv } else { 0.0 }),
    }
}

/// Per-channel statistics produced by a training-mode batch norm pass.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    /// Population variance (divide by N*H*W).
    pub var: Vec<f32>,
}

pub const BATCH_NORM_EPS: f32 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f32 = 0.9;

fn bn_check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let &[n, c, h, w] = &x.shape[..] else {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            shape: x.shape.clone(),
            reason: "expected NCHW".into(),
        });
    };
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: match name {
                    "gamma" => "batch_norm gamma",
                    _ => "batch_norm beta",
                },
                lhs: x.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok((n, c, h, w))
}

/// Training-mode batch norm: normalizes each channel over `(N, H, W)` with
/// the batch's own statistics. Returns the output and the batch statistics;
/// updating running statistics is the caller's side effect, so repeated
/// forward passes (e.g. finite-difference probes) stay pure.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, BatchNormStats)> {
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum = 0.0f32;
        for img in 0..n {
            let p = &x.data[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            sum += p.iter().sum::<f32>();
        }
        let mu = sum / m;
        let mut sq = 0.0f32;
        for img in 0..n {
            let p = &x.data[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            sq += p.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>();
        }
        mean[ci] = mu;
        var[ci] = sq / m;
    }
    let mut out = vec![0.0f32; x.len()];
    for img in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + BATCH_NORM_EPS).sqrt();
            let (g, b, mu) = (gamma.data[ci], beta.data[ci], mean[ci]);
            let src = &x.data[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            let dst = &mut out[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * inv + b;
            }
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), out)?,
        BatchNormStats { mean, var },
    ))
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm running stats",
            lhs: x.shape.clone(),
            rhs: running_mean.shape().to_vec(),
        });
    }
    if let Some(v) = running_var.data.iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidArgument {
            op: "batch_norm",
            reason: format!("negative running variance {v}"),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for img in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (running_var.data[ci] + BATCH_NORM_EPS).sqrt();
            let (g, b, mu) = (gamma.data[ci], beta.data[ci], running_mean.data[ci]);
            let src = &x.data[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            let dst = &mut out[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * inv + b;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = &x.shape[..] else {
        return Err(Error::InvalidShape {
            op: "global_avg_pool",
            shape: x.shape.clone(),
            reason: "expected NCHW".into(),
        });
    };
    let plane = h * w;
    let mut out = vec![0.0f32; n * c];
    for img in 0..n {
        for ci in 0..c {
            let p = &x.data[(img * c + ci) * plane..(img * c + ci + 1) * plane];
            out[img * c + ci] = p.iter().sum::<f32>() / plane as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Adds a length-`K` bias row to every row of `[N,K]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[n, k] = &x.shape[..] else {
        return Err(Error::InvalidShape {
            op: "add_row_bias",
            shape: x.shape.clone(),
            reason: "expected 2-D".into(),
        });
    };
    if bias.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "add_row_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(k) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Softmax probabilities per row, max-subtracted for stability.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let &[n, k] = &logits.shape[..] else {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: logits.shape.clone(),
            reason: "expected 2-D".into(),
        });
    };
    let mut out = vec![0.0f32; n * k];
    for (dst, src) in out.chunks_exact_mut(k).zip(logits.data.chunks_exact(k)) {
        let max = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (o, v) in dst.iter_mut().zip(src) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in dst.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![n, k], out)
}

fn check_onehot(onehot: &Tensor, n: usize, k: usize) -> Result<()> {
    if onehot.shape() != [n, k] {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: vec![n, k],
            rhs: onehot.shape().to_vec(),
        });
    }
    for (r, row) in onehot.data.chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("row {r} is not one-hot"),
            });
        }
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[true class]`.
/// Returns `(loss, probs)`; `probs` is what backward needs.
pub fn softmax_cross_entropy(logits: &Tensor, onehot: &Tensor) -> Result<(f32, Tensor)> {
    let &[n, k] = &logits.shape[..] else {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            shape: logits.shape.clone(),
            reason: "expected 2-D logits".into(),
        });
    };
    check_onehot(onehot, n, k)?;
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f32; n * k];
    for ((p_row, l_row), y_row) in probs
        .chunks_exact_mut(k)
        .zip(logits.data.chunks_exact(k))
        .zip(onehot.data.chunks_exact(k))
    {
        let max = l_row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (p, v) in p_row.iter_mut().zip(l_row) {
            let e = (v - max).exp();
            *p = e;
            sum += e;
        }
        let log_sum = sum.ln();
        for p in p_row.iter_mut() {
            *p /= sum;
        }
        for ((v, y), _) in l_row.iter().zip(y_row).zip(p_row.iter()) {
            if *y == 1.0 {
                loss += f64::from(-((v - max) - log_sum));
            }
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(vec![n, k], probs)?))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let &[_, k] = &logits.shape[..] else {
        return Err(Error::InvalidShape {
            op: "argmax",
            shape: logits.shape.clone(),
            reason: "expected 2-D".into(),
        });
    };
    Ok(logits
        .data
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

//! Channels-last compute engine.
//!
//! The reference ops in [`crate::tensor`] use the `[N,C,H,W]` layout their
//! contracts are written in. Training wants the same math an order of
//! magnitude faster, so the model runs activations as `[N,H,W,C]` rows
//! internally: patch extraction becomes contiguous segment copies, the conv
//! GEMM maps onto a register-tiled kernel, and batch-norm reductions
//! vectorize across the channel axis. Every function here is checked
//! against its `tensor` counterpart by layout-permutation tests.
//!
//! Parameters keep their canonical shapes (`[F,C,kh,kw]` kernels, `[C]`
//! norm vectors); kernels are repacked to `[kh*kw*C, F]` on the fly, which
//! is noise next to the GEMMs.
//!
//! Determinism: every output element is produced by one task with a fixed
//! sequential reduction order, and cross-image reductions use a fixed
//! number of partials summed in index order, so results are identical for
//! any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{conv_geometry, BatchNormStats, ConvGeometry, Padding, Tensor, BATCH_NORM_EPS};

/// `[N,C,H,W]` to `[N,H,W,C]`.
pub fn from_nchw(x: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "from_nchw",
            shape: x.shape().to_vec(),
            reason: "expected NCHW".into(),
        });
    };
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(plane * c).enumerate().for_each(|(img, dst)| {
        let src = &x.data()[img * c * plane..(img + 1) * c * plane];
        for ci in 0..c {
            for p in 0..plane {
                dst[p * c + ci] = src[ci * plane + p];
            }
        }
    });
    Tensor::new(vec![n, h, w, c], out)
}

/// `[N,H,W,C]` back to `[N,C,H,W]`.
pub fn to_nchw(x: &Tensor) -> Result<Tensor> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "to_nchw",
            shape: x.shape().to_vec(),
            reason: "expected NHWC".into(),
        });
    };
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(plane * c).enumerate().for_each(|(img, dst)| {
        let src = &x.data()[img * plane * c..(img + 1) * plane * c];
        for p in 0..plane {
            for ci in 0..c {
                dst[ci * plane + p] = src[p * c + ci];
            }
        }
    });
    Tensor::new(vec![n, c, h, w], out)
}

// ---------------------------------------------------------------------------
// Register-tiled GEMM
// ---------------------------------------------------------------------------

// C tile of 4 rows x 8 columns held in registers across the whole k loop:
// eight FMAs per B-vector load instead of one, which is what lifts this
// kernel past the load-bound dot-product formulation.
fn matmul_tile(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mb = m - m % 4;
    let nb = n - n % 8;
    for i0 in (0..mb).step_by(4) {
        let a0 = &a[i0 * k..(i0 + 1) * k];
        let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
        let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
        let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
        for j0 in (0..nb).step_by(8) {
            let mut acc = [[0.0f32; 8]; 4];
            for kk in 0..k {
                let bv = &b[kk * n + j0..kk * n + j0 + 8];
                let av = [a0[kk], a1[kk], a2[kk], a3[kk]];
                for (accr, avr) in acc.iter_mut().zip(av) {
                    for l in 0..8 {
                        accr[l] += avr * bv[l];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + 8].copy_from_slice(accr);
            }
        }
        for j in nb..n {
            for r in 0..4 {
                let ar = &a[(i0 + r) * k..(i0 + r + 1) * k];
                let mut s = 0.0f32;
                for (kk, av) in ar.iter().enumerate() {
                    s += av * b[kk * n + j];
                }
                c[(i0 + r) * n + j] = s;
            }
        }
    }
    for i in mb..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Canonical `[F,C,kh,kw]` kernel repacked to `[kh*kw*C, F]`, the layout the
/// NHWC patch matrix multiplies against.
pub fn pack_kernel(kernel: &Tensor) -> Result<Tensor> {
    let &[f, c, kh, kw] = kernel.shape() else {
        return Err(Error::InvalidShape {
            op: "pack_kernel",
            shape: kernel.shape().to_vec(),
            reason: "expected FCHW kernel".into(),
        });
    };
    let mut out = vec![0.0f32; kernel.len()];
    for fo in 0..f {
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    out[(((i * kw + j) * c) + ci) * f + fo] =
                        kernel.data()[((fo * c + ci) * kh + i) * kw + j];
                }
            }
        }
    }
    Tensor::new(vec![kh * kw * c, f], out)
}

fn unpack_kernel_grad(gkt: &[f32], f: usize, c: usize, kh: usize, kw: usize) -> Tensor {
    let mut out = vec![0.0f32; f * c * kh * kw];
    for i in 0..kh {
        for j in 0..kw {
            for ci in 0..c {
                for fo in 0..f {
                    out[((fo * c + ci) * kh + i) * kw + j] =
                        gkt[(((i * kw + j) * c) + ci) * f + fo];
                }
            }
        }
    }
    Tensor::new(vec![f, c, kh, kw], out).expect("shape fixed")
}

// One image's patch matrix [P, kh*kw*C]: row per output position, taps in
// (i, j, c) order so each tap contributes one contiguous C-segment.
fn im2row_image(
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
    let k = kh * kw * c;
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            let row = &mut col[(oh * geo.out_w + ow) * k..(oh * geo.out_w + ow + 1) * k];
            for i in 0..kh {
                let ih = (oh * stride + i) as isize - geo.pad_top as isize;
                for j in 0..kw {
                    let dst = &mut row[(i * kw + j) * c..(i * kw + j + 1) * c];
                    let iw = (ow * stride + j) as isize - geo.pad_left as isize;
                    if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (ih as usize * w + iw as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

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
    let k = kh * kw * c;
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            let row = &col[(oh * geo.out_w + ow) * k..(oh * geo.out_w + ow + 1) * k];
            for i in 0..kh {
                let ih = (oh * stride + i) as isize - geo.pad_top as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for j in 0..kw {
                    let iw = (ow * stride + j) as isize - geo.pad_left as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let src = &row[(i * kw + j) * c..(i * kw + j + 1) * c];
                    let base = (ih as usize * w + iw as usize) * c;
                    for (acc, v) in gx[base..base + c].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
        }
    }
}

fn conv_nhwc_check(
    input: &Tensor,
    kernel: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (&[n, h, w, c], &[f, kc, kh, kw]) = (input.shape(), kernel.shape()) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d nhwc",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d nhwc channel count",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    Ok((n, h, w, c, f, kh, kw))
}

/// Convolution over `[N,H,W,C]` with a canonical `[F,C,kh,kw]` kernel.
/// Same cross-correlation semantics and geometry as [`crate::tensor::conv2d`].
///
/// Three routes by shape: 1x1 stride-1 is a plain GEMM, 3x3 stride-1
/// same-pad runs the implicit shifted-window GEMM, everything else lowers
/// through a per-image patch matrix.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    Ok(conv2d_keep_cols(input, kernel, stride, padding, false)?.0)
}

/// [`conv2d`] that can also return the per-image patch matrices
/// (`[N, P*K]`), so a later backward pass skips re-lowering the input.
pub fn conv2d_keep_cols(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    keep_cols: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (n, h, w, c, f, kh, kw) = conv_nhwc_check(input, kernel)?;
    let geo = conv_geometry(h, w, kh, kw, stride, padding)?;
    let plane = geo.out_h * geo.out_w;
    let k = kh * kw * c;
    let kt = pack_kernel(kernel)?;
    let mut out = vec![0.0f32; n * plane * f];
    let trivial = kh == 1 && kw == 1 && stride == 1;
    if trivial || !keep_cols {
        out.par_chunks_mut(plane * f).enumerate().for_each(|(img, dst)| {
            let x = &input.data()[img * h * w * c..(img + 1) * h * w * c];
            if trivial {
                matmul_tile(x, kt.data(), dst, plane, k, f);
            } else {
                let mut col = vec![0.0f32; plane * k];
                im2row_image(x, c, h, w, kh, kw, stride, geo, &mut col);
                matmul_tile(&col, kt.data(), dst, plane, k, f);
            }
        });
        Ok((Tensor::new(vec![n, geo.out_h, geo.out_w, f], out)?, None))
    } else {
        let mut cols = vec![0.0f32; n * plane * k];
        out.par_chunks_mut(plane * f)
            .zip(cols.par_chunks_mut(plane * k))
            .enumerate()
            .for_each(|(img, (dst, col))| {
                let x = &input.data()[img * h * w * c..(img + 1) * h * w * c];
                im2row_image(x, c, h, w, kh, kw, stride, geo, col);
                matmul_tile(col, kt.data(), dst, plane, k, f);
            });
        Ok((
            Tensor::new(vec![n, geo.out_h, geo.out_w, f], out)?,
            Some(Tensor::new(vec![n, plane * k], cols)?),
        ))
    }
}

/// Backward of [`conv2d`]: `(grad_input, grad_kernel)` with the kernel
/// gradient returned in canonical `[F,C,kh,kw]` layout.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_grad_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    conv2d_backward_cached(input, kernel, None, grad_out, stride, padding, need_grad_input)
}

/// [`conv2d_backward`] reusing patch matrices kept from the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_cached(
    input: &Tensor,
    kernel: &Tensor,
    cols: Option<&Tensor>,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_grad_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (n, h, w, c, f, kh, kw) = conv_nhwc_check(input, kernel)?;
    let geo = conv_geometry(h, w, kh, kw, stride, padding)?;
    let plane = geo.out_h * geo.out_w;
    let k = kh * kw * c;
    debug_assert_eq!(grad_out.shape(), &[n, geo.out_h, geo.out_w, f]);
    let trivial = kh == 1 && kw == 1 && stride == 1;
    // kernel as [F, K] rows for the grad_col GEMM
    let kt = pack_kernel(kernel)?;
    let mut kmat = vec![0.0f32; f * k];
    for kk in 0..k {
        for fo in 0..f {
            kmat[fo * k + kk] = kt.data()[kk * f + fo];
        }
    }

    const PARTIALS: usize = 8;
    let imgs_per = n.div_ceil(PARTIALS);
    let mut grad_input = need_grad_input.then(|| vec![0.0f32; n * h * w * c]);

    // Per image: transpose g to [F, P], accumulate gk += g^T x col via the
    // tiled kernel, and scatter grad_col = g x kmat back onto the grid.
    let run_image = |img: usize, gx_img: Option<&mut [f32]>, gk: &mut [f32], scratch: &mut Scratch| {
        let x = &input.data()[img * h * w * c..(img + 1) * h * w * c];
        let g = &grad_out.data()[img * plane * f..(img + 1) * plane * f];
        let col_ref: &[f32] = if trivial {
            x
        } else if let Some(cached) = cols {
            &cached.data()[img * plane * k..(img + 1) * plane * k]
        } else {
            im2row_image(x, c, h, w, kh, kw, stride, geo, &mut scratch.col);
            &scratch.col
        };
        for p in 0..plane {
            for fo in 0..f {
                scratch.gt[fo * plane + p] = g[p * f + fo];
            }
        }
        // gk_partial [F, K] += g^T x col
        matmul_tile(&scratch.gt, col_ref, &mut scratch.gk, f, plane, k);
        for (acc, v) in gk.iter_mut().zip(&scratch.gk) {
            *acc += v;
        }
        if let Some(gx_img) = gx_img {
            // grad_col [P, K] = g [P, F] x kmat [F, K]
            matmul_tile(g, &kmat, &mut scratch.col_grad, plane, f, k);
            if trivial {
                for (acc, v) in gx_img.iter_mut().zip(&scratch.col_grad) {
                    *acc += v;
                }
            } else {
                col2im_image(&scratch.col_grad, c, h, w, kh, kw, stride, geo, gx_img);
            }
        }
    };

    struct Scratch {
        col: Vec<f32>,
        col_grad: Vec<f32>,
        gt: Vec<f32>,
        gk: Vec<f32>,
    }
    let new_scratch = || Scratch {
        col: vec![0.0f32; if trivial || cols.is_some() { 0 } else { plane * k }],
        col_grad: vec![0.0f32; plane * k],
        gt: vec![0.0f32; f * plane],
        gk: vec![0.0f32; f * k],
    };

    let kernel_partials: Vec<Vec<f32>> = match &mut grad_input {
        Some(gx) => gx
            .par_chunks_mut(imgs_per * h * w * c)
            .enumerate()
            .map(|(chunk, gx_chunk)| {
                let mut gkt = vec![0.0f32; f * k];
                let mut scratch = new_scratch();
                let lo = chunk * imgs_per;
                let hi = ((chunk + 1) * imgs_per).min(n);
                for (offset, img) in (lo..hi).enumerate() {
                    let gx_img = &mut gx_chunk[offset * h * w * c..(offset + 1) * h * w * c];
                    run_image(img, Some(gx_img), &mut gkt, &mut scratch);
                }
                gkt
            })
            .collect(),
        None => (0..PARTIALS)
            .into_par_iter()
            .map(|chunk| {
                let mut gkt = vec![0.0f32; f * k];
                let mut scratch = new_scratch();
                let lo = (chunk * imgs_per).min(n);
                let hi = ((chunk + 1) * imgs_per).min(n);
                for img in lo..hi {
                    run_image(img, None, &mut gkt, &mut scratch);
                }
                gkt
            })
            .collect(),
    };
    let mut gk_total = vec![0.0f32; f * k];
    for part in &kernel_partials {
        for (acc, v) in gk_total.iter_mut().zip(part) {
            *acc += v;
        }
    }
    // gk_total rows are [F, (i,j,c)] = transposed pack layout
    let mut gkt_packed = vec![0.0f32; f * k];
    for fo in 0..f {
        for kk in 0..k {
            gkt_packed[kk * f + fo] = gk_total[fo * k + kk];
        }
    }
    let grad_kernel = unpack_kernel_grad(&gkt_packed, f, c, kh, kw);
    let grad_input = match grad_input {
        Some(gx) => Some(Tensor::new(input.shape().to_vec(), gx)?),
        None => None,
    };
    Ok((grad_input, grad_kernel))
}

// ---------------------------------------------------------------------------
// Batch norm, pooling
// ---------------------------------------------------------------------------

fn bn_nhwc_check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "batch_norm nhwc",
            shape: x.shape().to_vec(),
            reason: "expected NHWC".into(),
        });
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm nhwc parameters",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok((n, h, w, c))
}

// Channel-wise reduction over all rows of a [rows, c] view: a fixed number
// of parallel partials summed in index order, so the result is independent
// of thread count.
fn reduce_rows(data: &[f32], c: usize, f: impl Fn(&[f32], &mut [f32]) + Sync) -> Vec<f32> {
    const PARTIALS: usize = 8;
    let rows = data.len() / c;
    let rows_per = rows.div_ceil(PARTIALS).max(1);
    let partials: Vec<Vec<f32>> = (0..PARTIALS)
        .into_par_iter()
        .map(|p| {
            let lo = (p * rows_per).min(rows);
            let hi = ((p + 1) * rows_per).min(rows);
            let mut acc = vec![0.0f32; c];
            for row in data[lo * c..hi * c].chunks_exact(c) {
                f(row, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f32; c];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

// Same pattern over two parallel row buffers; the accumulator is 2*c wide.
fn reduce_rows2(
    a: &[f32],
    b: &[f32],
    c: usize,
    f: impl Fn(&[f32], &[f32], &mut [f32]) + Sync,
) -> Vec<f32> {
    const PARTIALS: usize = 8;
    let rows = a.len() / c;
    let rows_per = rows.div_ceil(PARTIALS).max(1);
    let partials: Vec<Vec<f32>> = (0..PARTIALS)
        .into_par_iter()
        .map(|p| {
            let lo = (p * rows_per).min(rows);
            let hi = ((p + 1) * rows_per).min(rows);
            let mut acc = vec![0.0f32; 2 * c];
            for (ra, rb) in a[lo * c..hi * c]
                .chunks_exact(c)
                .zip(b[lo * c..hi * c].chunks_exact(c))
            {
                f(ra, rb, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f32; 2 * c];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Training-mode batch norm over `[N,H,W,C]`; channel reductions ride the
/// contiguous C axis. Same statistics convention as the reference op.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, BatchNormStats)> {
    batch_norm_train_act(x, gamma, beta, false)
}

/// [`batch_norm_train`] with an optional fused relu on the output.
pub fn batch_norm_train_act(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    relu: bool,
) -> Result<(Tensor, BatchNormStats)> {
    let (n, h, w, c) = bn_nhwc_check(x, gamma, beta)?;
    let rows = n * h * w;
    let m = rows as f32;
    let mut mean = reduce_rows(x.data(), c, |row, acc| {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    });
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mean_ref = &mean;
    let mut var = reduce_rows(x.data(), c, move |row, acc| {
        for ((a, v), mu) in acc.iter_mut().zip(row).zip(mean_ref) {
            let d = v - mu;
            *a += d * d;
        }
    });
    for v in var.iter_mut() {
        *v /= m;
    }
    let mut scale = vec![0.0f32; c];
    let mut shift = vec![0.0f32; c];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + BATCH_NORM_EPS).sqrt();
        scale[ci] = gamma.data()[ci] * inv;
        shift[ci] = beta.data()[ci] - mean[ci] * scale[ci];
    }
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(h * w * c)
        .zip(x.data().par_chunks(h * w * c))
        .for_each(|(dst, src)| {
            for (drow, srow) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                for ((o, v), (s, t)) in
                    drow.iter_mut().zip(srow).zip(scale.iter().zip(&shift))
                {
                    let y = v * s + t;
                    *o = if relu && y <= 0.0 { 0.0 } else { y };
                }
            }
        });
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormStats { mean, var },
    ))
}

/// Backward of [`batch_norm_train`]; returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BatchNormStats,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "batch_norm nhwc backward",
            shape: x.shape().to_vec(),
            reason: "expected NHWC".into(),
        });
    };
    let m = (n * h * w) as f32;
    let inv: Vec<f32> = stats
        .var
        .iter()
        .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
        .collect();
    // one paired pass accumulates [sum_g | sum_g_xhat]
    let inv_ref = &inv;
    let mean_ref = &stats.mean;
    let sums = reduce_rows2(grad_out.data(), x.data(), c, |grow, xrow, acc| {
        let (sg, sgx) = acc.split_at_mut(c);
        for ci in 0..c {
            let xh = (xrow[ci] - mean_ref[ci]) * inv_ref[ci];
            sg[ci] += grow[ci];
            sgx[ci] += grow[ci] * xh;
        }
    });
    let (sum_g, sum_gx) = sums.split_at(c);
    let sum_g = sum_g.to_vec();
    let sum_gx = sum_gx.to_vec();
    let mut gx = vec![0.0f32; x.len()];
    let chunk = h * w * c;
    gx.par_chunks_mut(chunk)
        .zip(x.data().par_chunks(chunk).zip(grad_out.data().par_chunks(chunk)))
        .for_each(|(dst, (xs, gs))| {
            for (drow, (xrow, grow)) in dst
                .chunks_exact_mut(c)
                .zip(xs.chunks_exact(c).zip(gs.chunks_exact(c)))
            {
                for ci in 0..c {
                    let xh = (xrow[ci] - stats.mean[ci]) * inv[ci];
                    drow[ci] = gamma.data()[ci] * inv[ci]
                        * (grow[ci] - sum_g[ci] / m - xh * sum_gx[ci] / m);
                }
            }
        });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![c], sum_gx)?,
        Tensor::new(vec![c], sum_g)?,
    ))
}

/// Inference-mode batch norm over `[N,H,W,C]` using running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    batch_norm_eval_act(x, gamma, beta, running_mean, running_var, false)
}

/// [`batch_norm_eval`] with an optional fused relu on the output.
pub fn batch_norm_eval_act(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    relu: bool,
) -> Result<Tensor> {
    let (_, h, w, c) = bn_nhwc_check(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm nhwc running stats",
            lhs: x.shape().to_vec(),
            rhs: running_mean.shape().to_vec(),
        });
    }
    if let Some(v) = running_var.data().iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidArgument {
            op: "batch_norm",
            reason: format!("negative running variance {v}"),
        });
    }
    let mut scale = vec![0.0f32; c];
    let mut shift = vec![0.0f32; c];
    for ci in 0..c {
        let inv = 1.0 / (running_var.data()[ci] + BATCH_NORM_EPS).sqrt();
        scale[ci] = gamma.data()[ci] * inv;
        shift[ci] = beta.data()[ci] - running_mean.data()[ci] * scale[ci];
    }
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(h * w * c)
        .zip(x.data().par_chunks(h * w * c))
        .for_each(|(dst, src)| {
            for (drow, srow) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                for ((o, v), (s, t)) in drow.iter_mut().zip(srow).zip(scale.iter().zip(&shift)) {
                    let y = v * s + t;
                    *o = if relu && y <= 0.0 { 0.0 } else { y };
                }
            }
        });
    Tensor::new(x.shape().to_vec(), out)
}

/// `[N,H,W,C] -> [N,C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "global_avg_pool nhwc",
            shape: x.shape().to_vec(),
            reason: "expected NHWC".into(),
        });
    };
    let plane = h * w;
    let mut out = vec![0.0f32; n * c];
    for (dst, img) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(plane * c)) {
        for row in img.chunks_exact(c) {
            for (acc, v) in dst.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in dst.iter_mut() {
            *v /= plane as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[n, h, w, c] = x_shape else {
        return Err(Error::InvalidShape {
            op: "global_avg_pool nhwc backward",
            shape: x_shape.to_vec(),
            reason: "expected NHWC".into(),
        });
    };
    let plane = h * w;
    let mut gx = vec![0.0f32; n * plane * c];
    for (img, gout) in gx.chunks_exact_mut(plane * c).zip(grad_out.data().chunks_exact(c)) {
        for row in img.chunks_exact_mut(c) {
            for (o, g) in row.iter_mut().zip(gout) {
                *o = g / plane as f32;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

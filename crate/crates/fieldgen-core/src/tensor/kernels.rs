//! Raw forward/backward kernels shared by the tape.
//!
//! Every kernel iterates in a fixed order so results are deterministic.
//! Convolution goes through im2col so both directions reuse the matmul
//! inner loop; the column buffer is rebuilt in backward rather than saved.

use super::{Scalar, Tensor};

/// C[m,n] = A[m,k] * B[k,n], accumulated in ikj order.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T.
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::ZERO;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_at<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Output spatial extent of a convolution; `None` when not integral.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    let steps = span - kernel;
    if !steps.is_multiple_of(stride) {
        return None;
    }
    Some(steps / stride + 1)
}

/// Unfold `[cin, h, w]` into a `[cin*kh*kw, ho*wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let mut cols = vec![S::ZERO; cin * kh * kw * ho * wo];
    let ncols = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[cin*kh*kw, ho*wo]` column-gradient matrix back onto `[cin, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let mut x = vec![S::ZERO; cin * h * w];
    let ncols = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[dst_row + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_lastdim<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let cols = *x.shape().last().expect("softmax on 0-d tensor");
    let rows = x.numel() / cols;
    let mut out = vec![S::ZERO; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maximum(v);
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = S::ZERO;
        for (d, &v) in dst.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *d = e;
            sum += e;
        }
        let inv = S::ONE / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Tensor::from_vec(x.shape(), out).expect("softmax shape")
}

/// dL/dx for softmax given its own output `y`: y * (dy - sum(dy * y)) per row.
pub fn softmax_lastdim_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let cols = *y.shape().last().unwrap();
    let rows = y.numel() / cols;
    let mut dx = vec![S::ZERO; y.numel()];
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let dyr = &dy.data()[r * cols..(r + 1) * cols];
        let mut dot = S::ZERO;
        for j in 0..cols {
            dot += yr[j] * dyr[j];
        }
        let dst = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("softmax backward shape")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row mean/variance normalization with affine transform over the last dim.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S]) -> Tensor<S> {
    let cols = *x.shape().last().unwrap();
    let rows = x.numel() / cols;
    let eps = S::from_f64(LAYER_NORM_EPS);
    let inv_n = S::ONE / S::from_f64(cols as f64);
    let mut out = vec![S::ZERO; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = S::ONE / (var + eps).sqrt();
        let dst = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    Tensor::from_vec(x.shape(), out).expect("layer_norm shape")
}

/// Gradients for layer_norm: returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    dy: &Tensor<S>,
) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let cols = *x.shape().last().unwrap();
    let rows = x.numel() / cols;
    let eps = S::from_f64(LAYER_NORM_EPS);
    let inv_n = S::ONE / S::from_f64(cols as f64);
    let mut dx = vec![S::ZERO; x.numel()];
    let mut dgamma = vec![S::ZERO; cols];
    let mut dbeta = vec![S::ZERO; cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let dyr = &dy.data()[r * cols..(r + 1) * cols];
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = S::ONE / (var + eps).sqrt();

        // xhat = (x - mean) * inv_std; dxhat = dy * gamma
        let mut sum_dxhat = S::ZERO;
        let mut sum_dxhat_xhat = S::ZERO;
        for j in 0..cols {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = dyr[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
        }
        let dst = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = dyr[j] * gamma[j];
            dst[j] = (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) * inv_n) * inv_std;
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("layer_norm backward shape"),
        dgamma,
        dbeta,
    )
}

/// Nearest-neighbor 2x spatial upsampling of `[c, h, w]`.
pub fn upsample_nearest2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h2 {
            let src_row = (ch * h + y / 2) * w;
            let dst_row = (ch * h2 + y) * w2;
            for xx in 0..w2 {
                out[dst_row + xx] = x[src_row + xx / 2];
            }
        }
    }
    out
}

/// Backward of nearest upsampling: each source cell sums its 2x2 block.
pub fn upsample_nearest2_backward<S: Scalar>(dy: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; c * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h2 {
            let dst_row = (ch * h + y / 2) * w;
            let src_row = (ch * h2 + y) * w2;
            for xx in 0..w2 {
                dx[dst_row + xx / 2] += dy[src_row + xx];
            }
        }
    }
    dx
}

/// Rearrange `[c, h, w]` into `[g*g, c*p*p]` tokens over a g x g grid of
/// p x p patches (p = h/g). Token i covers grid cell (i/g, i%g), row-major;
/// within a token the layout is channel-major then patch row, patch column.
pub fn patchify<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, g: usize) -> Vec<S> {
    let p = h / g;
    let pw = w / g;
    debug_assert_eq!(p, pw, "patchify assumes square patches");
    let tok_len = c * p * p;
    let mut out = vec![S::ZERO; g * g * tok_len];
    for gy in 0..g {
        for gx in 0..g {
            let tok = gy * g + gx;
            let dst = &mut out[tok * tok_len..(tok + 1) * tok_len];
            for ch in 0..c {
                for py in 0..p {
                    let src_row = (ch * h + gy * p + py) * w + gx * p;
                    let dst_off = (ch * p + py) * p;
                    dst[dst_off..dst_off + p].copy_from_slice(&x[src_row..src_row + p]);
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`]: `[g*g, c*p*p]` tokens back to `[c, h, w]`.
pub fn unpatchify<S: Scalar>(tokens: &[S], c: usize, g: usize, p: usize) -> Vec<S> {
    let h = g * p;
    let w = g * p;
    let tok_len = c * p * p;
    let mut out = vec![S::ZERO; c * h * w];
    for gy in 0..g {
        for gx in 0..g {
            let tok = gy * g + gx;
            let src = &tokens[tok * tok_len..(tok + 1) * tok_len];
            for ch in 0..c {
                for py in 0..p {
                    let dst_row = (ch * h + gy * p + py) * w + gx * p;
                    let src_off = (ch * p + py) * p;
                    out[dst_row..dst_row + p].copy_from_slice(&src[src_off..src_off + p]);
                }
            }
        }
    }
    out
}

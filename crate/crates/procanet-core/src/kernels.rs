//! Forward numerical kernels: convolution (a direct reference route and an
//! im2col+GEMM route), matrix multiply, 2x2 max pooling and nearest-neighbor
//! upsampling.
//!
//! Determinism contract: every output element is produced by exactly one
//! task and its reduction runs in a fixed ascending order, so results are
//! bitwise identical across runs and across rayon worker counts. The two
//! conv routes sum taps in the same (channel, ky, kx) order on purpose: they
//! must agree exactly, which makes cross-checks sharp.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D convolution kernel with per-output-channel bias.
///
/// Square kernels only: 3x3 with zero padding 1 (shape preserving) or 1x1
/// with padding 0. Weight layout is `[out_ch][in_ch][kh][kw]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<F> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> ConvKernel<F> {
    pub fn new(out_ch: usize, in_ch: usize, ksize: usize, weight: Vec<F>, bias: Vec<F>) -> Result<Self> {
        if out_ch == 0 || in_ch == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv kernel channels must be positive, got {out_ch}x{in_ch}"
            )));
        }
        if ksize != 1 && ksize != 3 {
            return Err(Error::InvalidConfig(format!(
                "conv kernel size must be 1 or 3, got {ksize}"
            )));
        }
        let wlen = out_ch * in_ch * ksize * ksize;
        if weight.len() != wlen {
            return Err(Error::DataLength {
                op: "conv kernel weight",
                expected: wlen,
                got: weight.len(),
            });
        }
        if bias.len() != out_ch {
            return Err(Error::DataLength {
                op: "conv kernel bias",
                expected: out_ch,
                got: bias.len(),
            });
        }
        Ok(ConvKernel {
            out_ch,
            in_ch,
            kh: ksize,
            kw: ksize,
            padding: if ksize == 3 { 1 } else { 0 },
            weight,
            bias,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, ksize: usize) -> Result<Self> {
        let weight = vec![F::zero(); out_ch * in_ch * ksize * ksize];
        let bias = vec![F::zero(); out_ch];
        ConvKernel::new(out_ch, in_ch, ksize, weight, bias)
    }

    pub fn weight_len(&self) -> usize {
        self.weight.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn out_dims(&self, x: &Tensor<F>) -> Result<(usize, usize)> {
        if x.c() != self.in_ch {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: self.in_ch,
                got: x.c(),
            });
        }
        let oh = (x.h() + 2 * self.padding).checked_sub(self.kh - 1);
        let ow = (x.w() + 2 * self.padding).checked_sub(self.kw - 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::InvalidConfig(format!(
                "conv input {}x{} too small for {}x{} kernel",
                x.h(),
                x.w(),
                self.kh,
                self.kw
            ))),
        }
    }
}

/// Reference convolution: direct quadruple loop, zero padding, taps summed
/// in ascending (channel, ky, kx) order, bias added last.
pub fn conv2d_naive<F: Scalar>(x: &Tensor<F>, k: &ConvKernel<F>) -> Result<Tensor<F>> {
    let (oh, ow) = k.out_dims(x)?;
    let (n, in_ch, h, w) = (x.n(), x.c(), x.h(), x.w());
    let pad = k.padding as isize;
    let mut y = Tensor::zeros([n, k.out_ch, oh, ow]);
    for s in 0..n {
        let xs = x.sample(s);
        for o in 0..k.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for c in 0..in_ch {
                        for ky in 0..k.kh {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k.kw {
                                let ix = ox as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wv = k.weight[((o * in_ch + c) * k.kh + ky) * k.kw + kx];
                                let xv = xs[(c * h + iy as usize) * w + ix as usize];
                                acc += wv * xv;
                            }
                        }
                    }
                    let idx = y.offset(s, o, oy, ox);
                    y.data_mut()[idx] = acc + k.bias[o];
                }
            }
        }
    }
    Ok(y)
}

/// Unfold one input sample into the patch matrix: row `(c*kh + ky)*kw + kx`,
/// column `oy*ow + ox`. Out-of-image taps are zero.
pub(crate) fn im2col<F: Scalar>(
    xs: &[F],
    in_ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    patches: &mut [F],
) {
    debug_assert_eq!(patches.len(), in_ch * kh * kw * oh * ow);
    let ohw = oh * ow;
    for c in 0..in_ch {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ohw;
                // Valid output columns for this tap: 0 <= ox + kx - pad < w.
                let lo = pad.saturating_sub(kx);
                let hi = (w + pad - kx).min(ow);
                for oy in 0..oh {
                    let dst = &mut patches[row + oy * ow..row + (oy + 1) * ow];
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    dst[..lo].iter_mut().for_each(|v| *v = F::zero());
                    dst[lo..hi].copy_from_slice(&xs[src_row + lo + kx - pad..src_row + hi + kx - pad]);
                    dst[hi..].iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
    }
}

/// Fold a patch-matrix-shaped gradient back onto the input, accumulating
/// overlapping taps. Exact adjoint of `im2col`.
pub(crate) fn col2im_acc<F: Scalar>(
    grad: &[F],
    in_ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dxs: &mut [F],
) {
    debug_assert_eq!(dxs.len(), in_ch * h * w);
    let ohw = oh * ow;
    for c in 0..in_ch {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ohw;
                let lo = pad.saturating_sub(kx);
                let hi = (w + pad - kx).min(ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &grad[row + oy * ow + lo..row + oy * ow + hi];
                    let dst_row = (c * h + iy as usize) * w + lo + kx - pad;
                    let dst = &mut dxs[dst_row..dst_row + (hi - lo)];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x p`, `c: m x p`.
/// i-k-j loop order: each `c[i][j]` accumulates over k ascending, and the
/// unit-stride inner loop vectorizes without reassociation.
pub(crate) fn gemm_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

pub(crate) fn transpose<F: Scalar>(src: &[F], rows: usize, cols: usize) -> Vec<F> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![F::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Dense row-major matrix, used for the public matmul contract.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                op: "matrix",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }
}

pub fn matmul<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_acc(&mut c.data, &a.data, &b.data, a.rows, a.cols, b.cols);
    Ok(c)
}

/// im2col + GEMM convolution. Bitwise identical to `conv2d_naive` (same tap
/// order per output element). Batch samples run in parallel.
pub fn conv2d_fast<F: Scalar>(x: &Tensor<F>, k: &ConvKernel<F>) -> Result<Tensor<F>> {
    let (oh, ow) = k.out_dims(x)?;
    let (n, in_ch, h, w) = (x.n(), x.c(), x.h(), x.w());
    let ohw = oh * ow;
    let k_rows = in_ch * k.kh * k.kw;
    let in_len = in_ch * h * w;
    let out_len = k.out_ch * ohw;
    let mut y = Tensor::zeros([n, k.out_ch, oh, ow]);
    if n == 0 {
        return Ok(y);
    }
    y.data_mut()
        .par_chunks_mut(out_len)
        .zip(x.data().par_chunks(in_len))
        .for_each(|(ys, xs)| {
            let mut patches = vec![F::zero(); k_rows * ohw];
            im2col(xs, in_ch, h, w, k.kh, k.kw, k.padding, oh, ow, &mut patches);
            gemm_acc(ys, &k.weight, &patches, k.out_ch, k_rows, ohw);
            for (o, row) in ys.chunks_mut(ohw).enumerate() {
                let b = k.bias[o];
                for v in row {
                    *v = *v + b;
                }
            }
        });
    Ok(y)
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element. Ties go to the
/// first occurrence in row-major window order.
pub fn maxpool2x2<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatial {
            op: "maxpool2x2",
            h,
            w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; y.len()];
    let xd = x.data();
    let mut out_idx = 0;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xd[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    y.data_mut()[out_idx] = best;
                    argmax[out_idx] = best_idx;
                    out_idx += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Nearest-neighbor 2x upsampling: each input element becomes a 2x2 block.
pub fn upsample_nearest2x<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for s in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                let src = &x.data()[((s * c + ch) * h + iy) * w..((s * c + ch) * h + iy + 1) * w];
                for dy in 0..2 {
                    let dst_row = ((s * c + ch) * 2 * h + 2 * iy + dy) * 2 * w;
                    let dst = &mut y.data_mut()[dst_row..dst_row + 2 * w];
                    for (ix, &v) in src.iter().enumerate() {
                        dst[2 * ix] = v;
                        dst[2 * ix + 1] = v;
                    }
                }
            }
        }
    }
    y
}

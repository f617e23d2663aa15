//! Layer-paired reverse-mode gradients.
//!
//! The network is a static feed-forward composition, so there is no general
//! graph tape: each layer's forward returns (output, context) and its
//! backward consumes the context plus the upstream gradient. Contexts can
//! only be produced by the matching forward, which rules out mismatched
//! backward calls by construction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{col2im_acc, gemm_acc, im2col, transpose, ConvKernel};
use crate::scalar::Scalar;
use crate::tensor::{elementwise, ElemOp, Shape, Tensor};

/// Gradient of one conv kernel, same layout as the kernel itself.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrad<F> {
    pub d_weight: Vec<F>,
    pub d_bias: Vec<F>,
}

impl<F: Scalar> KernelGrad<F> {
    pub fn zeros_like(k: &ConvKernel<F>) -> Self {
        KernelGrad {
            d_weight: vec![F::zero(); k.weight.len()],
            d_bias: vec![F::zero(); k.bias.len()],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_weight.iter().chain(&self.d_bias).all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// conv

pub struct ConvCtx<F> {
    input: Tensor<F>,
}

impl<F: Scalar> ConvCtx<F> {
    pub fn input(&self) -> &Tensor<F> {
        &self.input
    }
}

pub fn conv_forward<F: Scalar>(
    x: &Tensor<F>,
    k: &ConvKernel<F>,
) -> Result<(Tensor<F>, ConvCtx<F>)> {
    let y = crate::kernels::conv2d_fast(x, k)?;
    Ok((y, ConvCtx { input: x.clone() }))
}

/// Input gradient is the full correlation of the upstream with the flipped
/// kernel (realized as `col2im(W^T . dY)`); weight gradient correlates the
/// saved input with the upstream (`dY . P^T`); bias gradient sums upstream
/// over batch and space. Per-sample work is parallel, cross-sample sums run
/// in ascending sample order.
pub fn conv_backward<F: Scalar>(
    k: &ConvKernel<F>,
    ctx: &ConvCtx<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, KernelGrad<F>)> {
    let x = &ctx.input;
    let (n, in_ch, h, w) = (x.n(), x.c(), x.h(), x.w());
    let oh = h + 2 * k.padding - (k.kh - 1);
    let ow = w + 2 * k.padding - (k.kw - 1);
    let expect: Shape = [n, k.out_ch, oh, ow];
    if upstream.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "conv_backward",
            left: format!("{:?}", expect),
            right: format!("{:?}", upstream.shape()),
        });
    }
    let ohw = oh * ow;
    let k_rows = in_ch * k.kh * k.kw;
    let in_len = in_ch * h * w;
    let out_len = k.out_ch * ohw;
    let w_t = transpose(&k.weight, k.out_ch, k_rows);

    let mut dx = Tensor::zeros(x.shape());
    let partials: Vec<(Vec<F>, Vec<F>)> = dx
        .data_mut()
        .par_chunks_mut(in_len.max(1))
        .zip(x.data().par_chunks(in_len.max(1)))
        .zip(upstream.data().par_chunks(out_len.max(1)))
        .map(|((dxs, xs), us)| {
            let mut patches = vec![F::zero(); k_rows * ohw];
            im2col(xs, in_ch, h, w, k.kh, k.kw, k.padding, oh, ow, &mut patches);
            // dW_s = dY_s . P_s^T
            let p_t = transpose(&patches, k_rows, ohw);
            let mut dw = vec![F::zero(); k.out_ch * k_rows];
            gemm_acc(&mut dw, us, &p_t, k.out_ch, ohw, k_rows);
            let mut db = vec![F::zero(); k.out_ch];
            for (o, row) in us.chunks(ohw).enumerate() {
                let mut acc = F::zero();
                for &v in row {
                    acc += v;
                }
                db[o] = acc;
            }
            // dX_s = col2im(W^T . dY_s)
            let mut col_grad = vec![F::zero(); k_rows * ohw];
            gemm_acc(&mut col_grad, &w_t, us, k_rows, k.out_ch, ohw);
            col2im_acc(&col_grad, in_ch, h, w, k.kh, k.kw, k.padding, oh, ow, dxs);
            (dw, db)
        })
        .collect();

    let mut grad = KernelGrad::zeros_like(k);
    for (dw, db) in &partials {
        for (acc, &v) in grad.d_weight.iter_mut().zip(dw) {
            *acc += v;
        }
        for (acc, &v) in grad.d_bias.iter_mut().zip(db) {
            *acc += v;
        }
    }
    Ok((dx, grad))
}

// ---------------------------------------------------------------------------
// activations

pub struct ReluCtx<F> {
    input: Tensor<F>,
}

pub fn relu_forward<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, ReluCtx<F>) {
    (
        crate::tensor::activation(crate::tensor::Activation::Relu, x),
        ReluCtx { input: x.clone() },
    )
}

/// Upstream masked by forward-positive positions; the subgradient at
/// exactly zero is zero.
pub fn relu_backward<F: Scalar>(ctx: &ReluCtx<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    if upstream.shape() != ctx.input.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: format!("{:?}", ctx.input.shape()),
            right: format!("{:?}", upstream.shape()),
        });
    }
    let data = ctx
        .input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > F::zero() { u } else { F::zero() })
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}

pub struct SigmoidCtx<F> {
    output: Tensor<F>,
}

pub fn sigmoid_forward<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, SigmoidCtx<F>) {
    let y = crate::tensor::activation(crate::tensor::Activation::Sigmoid, x);
    (
        y.clone(),
        SigmoidCtx { output: y },
    )
}

/// d/dx sigmoid(x) = y(1-y), recovered from the saved output.
pub fn sigmoid_backward<F: Scalar>(ctx: &SigmoidCtx<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    if upstream.shape() != ctx.output.shape() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_backward",
            left: format!("{:?}", ctx.output.shape()),
            right: format!("{:?}", upstream.shape()),
        });
    }
    let data = ctx
        .output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&y, &u)| u * y * (F::one() - y))
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}

// ---------------------------------------------------------------------------
// pooling / upsampling

pub struct PoolCtx {
    input_shape: Shape,
    argmax: Vec<usize>,
}

impl PoolCtx {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }
}

pub fn maxpool_forward<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, PoolCtx)> {
    let (y, argmax) = crate::kernels::maxpool2x2(x)?;
    Ok((
        y,
        PoolCtx {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

/// Routes each upstream element to the recorded argmax position.
pub fn maxpool_backward<F: Scalar>(ctx: &PoolCtx, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    if upstream.len() != ctx.argmax.len() {
        return Err(Error::DataLength {
            op: "maxpool_backward",
            expected: ctx.argmax.len(),
            got: upstream.len(),
        });
    }
    let mut dx = Tensor::zeros(ctx.input_shape);
    let d = dx.data_mut();
    for (&src, &u) in ctx.argmax.iter().zip(upstream.data()) {
        d[src] += u;
    }
    Ok(dx)
}

pub struct UpsampleCtx {
    input_shape: Shape,
}

pub fn upsample_forward<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, UpsampleCtx) {
    (
        crate::kernels::upsample_nearest2x(x),
        UpsampleCtx {
            input_shape: x.shape(),
        },
    )
}

/// Each input position receives the sum of its 2x2 replicated block.
pub fn upsample_backward<F: Scalar>(ctx: &UpsampleCtx, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, c, h, w] = ctx.input_shape;
    let expect: Shape = [n, c, 2 * h, 2 * w];
    if upstream.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "upsample_backward",
            left: format!("{:?}", expect),
            right: format!("{:?}", upstream.shape()),
        });
    }
    let mut dx = Tensor::zeros(ctx.input_shape);
    for s in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = F::zero();
                    for dy in 0..2 {
                        for dxo in 0..2 {
                            acc += upstream.at(s, ch, 2 * iy + dy, 2 * ix + dxo);
                        }
                    }
                    dx.set(s, ch, iy, ix, acc);
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// elementwise combinators

pub struct MulCtx<F> {
    lhs: Tensor<F>,
    rhs: Tensor<F>,
}

pub fn mul_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<(Tensor<F>, MulCtx<F>)> {
    let y = elementwise(ElemOp::Mul, a, b)?;
    Ok((
        y,
        MulCtx {
            lhs: a.clone(),
            rhs: b.clone(),
        },
    ))
}

/// Returns (d_lhs, d_rhs) = (upstream * rhs, upstream * lhs).
pub fn mul_backward<F: Scalar>(
    ctx: &MulCtx<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let da = elementwise(ElemOp::Mul, upstream, &ctx.rhs)?;
    let db = elementwise(ElemOp::Mul, upstream, &ctx.lhs)?;
    Ok((da, db))
}

pub fn add_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    elementwise(ElemOp::Add, a, b)
}

/// Addition passes the upstream through to both operands.
pub fn add_backward<F: Scalar>(upstream: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    (upstream.clone(), upstream.clone())
}

pub struct ConcatCtx {
    left_channels: usize,
}

/// Concatenate along the channel axis; batch and spatial dims must match.
pub fn concat_channels<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(Tensor<F>, ConcatCtx)> {
    if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    let (n, h, w) = (a.n(), a.h(), a.w());
    let c = a.c() + b.c();
    let mut y = Tensor::zeros([n, c, h, w]);
    let a_len = a.c() * h * w;
    let b_len = b.c() * h * w;
    for s in 0..n {
        let dst = &mut y.data_mut()[s * (a_len + b_len)..(s + 1) * (a_len + b_len)];
        dst[..a_len].copy_from_slice(a.sample(s));
        dst[a_len..].copy_from_slice(b.sample(s));
    }
    Ok((y, ConcatCtx { left_channels: a.c() }))
}

/// Splits the upstream back into the two concatenated operands.
pub fn concat_backward<F: Scalar>(
    ctx: &ConcatCtx,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (n, c, h, w) = (upstream.n(), upstream.c(), upstream.h(), upstream.w());
    if ctx.left_channels >= c {
        return Err(Error::ChannelMismatch {
            op: "concat_backward",
            expected: ctx.left_channels + 1,
            got: c,
        });
    }
    let ca = ctx.left_channels;
    let cb = c - ca;
    let mut da = Tensor::zeros([n, ca, h, w]);
    let mut db = Tensor::zeros([n, cb, h, w]);
    let a_len = ca * h * w;
    let b_len = cb * h * w;
    for s in 0..n {
        let src = upstream.sample(s);
        da.data_mut()[s * a_len..(s + 1) * a_len].copy_from_slice(&src[..a_len]);
        db.data_mut()[s * b_len..(s + 1) * b_len].copy_from_slice(&src[a_len..]);
    }
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// finite differences

/// |a - b| / max(|a|, |b|, 1e-6)
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct CoordReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_backward_identity_kernel_routes_upstream_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::uniform([2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let k = ConvKernel::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        let (_, ctx) = conv_forward(&x, &k).unwrap();
        let up = Tensor::<f32>::uniform([2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let (dx, grad) = conv_backward(&k, &ctx, &up).unwrap();
        assert_eq!(dx.data(), up.data());
        // d_weight = sum(x * up), d_bias = sum(up)
        let dw: f32 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert!((grad.d_weight[0] - dw).abs() < 1e-6);
        let db: f32 = up.data().iter().sum();
        assert!((grad.d_bias[0] - db).abs() < 1e-6);
    }

    #[test]
    fn conv_backward_scaling_kernel_scales_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let k = ConvKernel::new(1, 1, 1, vec![2.0], vec![0.5]).unwrap();
        let (_, ctx) = conv_forward(&x, &k).unwrap();
        let up = Tensor::<f32>::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let (dx, _) = conv_backward(&k, &ctx, &up).unwrap();
        for (d, u) in dx.data().iter().zip(up.data()) {
            assert_eq!(*d, 2.0 * u);
        }
    }

    #[test]
    fn relu_backward_masks_non_positive_including_zero() {
        let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
        let (_, ctx) = relu_forward(&x);
        let up = t([1, 1, 1, 3], &[1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&ctx, &up).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_backward_at_zero_is_quarter() {
        let x = t([1, 1, 1, 1], &[0.0]);
        let (_, ctx) = sigmoid_forward(&x);
        let up = t([1, 1, 1, 1], &[1.0]);
        assert_eq!(sigmoid_backward(&ctx, &up).unwrap().data(), &[0.25]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let x = t([1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]);
        let (_, ctx) = maxpool_forward(&x).unwrap();
        let up = t([1, 1, 1, 1], &[7.0]);
        assert_eq!(maxpool_backward(&ctx, &up).unwrap().data(), &[0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_tie_routes_to_first() {
        let x = t([1, 1, 2, 2], &[4.0, 4.0, 4.0, 4.0]);
        let (_, ctx) = maxpool_forward(&x).unwrap();
        let up = t([1, 1, 1, 1], &[1.0]);
        assert_eq!(maxpool_backward(&ctx, &up).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = t([1, 1, 1, 1], &[3.0]);
        let (_, ctx) = upsample_forward(&x);
        let up = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(upsample_backward(&ctx, &up).unwrap().data(), &[10.0]);
    }

    #[test]
    fn mul_backward_swaps_operands() {
        let a = t([1, 1, 1, 2], &[2.0, 3.0]);
        let b = t([1, 1, 1, 2], &[5.0, 7.0]);
        let (_, ctx) = mul_forward(&a, &b).unwrap();
        let up = t([1, 1, 1, 2], &[1.0, 1.0]);
        let (da, db) = mul_backward(&ctx, &up).unwrap();
        assert_eq!(da.data(), &[5.0, 7.0]);
        assert_eq!(db.data(), &[2.0, 3.0]);
    }

    #[test]
    fn concat_roundtrip_splits_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f32>::uniform([2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform([2, 2, 2, 2], -1.0, 1.0, &mut rng);
        let (y, ctx) = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), [2, 5, 2, 2]);
        let (da, db) = concat_backward(&ctx, &y).unwrap();
        assert_eq!(da.data(), a.data());
        assert_eq!(db.data(), b.data());
    }

    #[test]
    fn fused_conv_relu_backward_equals_sequential_chain() {
        // Closed form for y = relu(w*x + b) with a 1x1 kernel:
        // dy/dx = w * [w*x + b > 0].
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let k = ConvKernel::new(1, 1, 1, vec![2.0], vec![0.1]).unwrap();
        let (y1, conv_ctx) = conv_forward(&x, &k).unwrap();
        let (_, relu_ctx) = relu_forward(&y1);
        let up = Tensor::<f32>::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let d1 = relu_backward(&relu_ctx, &up).unwrap();
        let (sequential, _) = conv_backward(&k, &conv_ctx, &d1).unwrap();
        let fused: Vec<f32> = x
            .data()
            .iter()
            .zip(up.data())
            .map(|(&xv, &uv)| if 2.0 * xv + 0.1 > 0.0 { 2.0 * uv } else { 0.0 })
            .collect();
        assert_eq!(sequential.data(), &fused[..]);
    }
}

//! Progressive self/cross attention over two encoder streams.
//!
//! Stage 1 gates each stream by its own sigmoid mask (self attention),
//! stage 2 computes a mask from one refined stream and applies it to the
//! other (cross attention), stage 3 fuses by elementwise addition:
//!
//!   a_r = sigmoid(W_r(x_r))            x_hat_r = x_r * a_r
//!   a_rn = sigmoid(W_rn(x_hat_r))      x_tilde_n = x_hat_n * a_rn
//!   a_nr = sigmoid(W_nr(x_hat_n))      x_tilde_r = x_hat_r * a_nr
//!   fused = x_tilde_r + x_tilde_n
//!
//! All four mask convolutions are channel-preserving 3x3, so masks are full
//! 3-D (per channel and per position).

use crate::autograd::{
    conv_backward, conv_forward, mul_backward, mul_forward, sigmoid_backward, sigmoid_forward,
    ConvCtx, KernelGrad, MulCtx, SigmoidCtx,
};
use crate::error::{Error, Result};
use crate::kernels::ConvKernel;
use crate::scalar::Scalar;
use crate::tensor::{elementwise, ElemOp, Tensor};

/// The four mask kernels of one attention block, all `channels -> channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcaParams<F> {
    pub w_self_r: ConvKernel<F>,
    pub w_self_n: ConvKernel<F>,
    pub w_cross_r_to_n: ConvKernel<F>,
    pub w_cross_n_to_r: ConvKernel<F>,
}

impl<F: Scalar> ProcaParams<F> {
    pub fn new(
        w_self_r: ConvKernel<F>,
        w_self_n: ConvKernel<F>,
        w_cross_r_to_n: ConvKernel<F>,
        w_cross_n_to_r: ConvKernel<F>,
    ) -> Result<Self> {
        for (name, k) in [
            ("w_self_r", &w_self_r),
            ("w_self_n", &w_self_n),
            ("w_cross_r_to_n", &w_cross_r_to_n),
            ("w_cross_n_to_r", &w_cross_n_to_r),
        ] {
            if k.in_ch != k.out_ch {
                return Err(Error::InvalidConfig(format!(
                    "attention kernel {name} must preserve channels, got {}->{}",
                    k.in_ch, k.out_ch
                )));
            }
            if k.in_ch != w_self_r.in_ch {
                return Err(Error::InvalidConfig(format!(
                    "attention kernel {name} channel count {} disagrees with {}",
                    k.in_ch, w_self_r.in_ch
                )));
            }
            if k.kh != 3 {
                return Err(Error::InvalidConfig(format!(
                    "attention kernel {name} must be 3x3, got {}x{}",
                    k.kh, k.kw
                )));
            }
        }
        Ok(ProcaParams {
            w_self_r,
            w_self_n,
            w_cross_r_to_n,
            w_cross_n_to_r,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_self_r.in_ch
    }

    pub fn kernels(&self) -> [(&'static str, &ConvKernel<F>); 4] {
        [
            ("self_r", &self.w_self_r),
            ("self_n", &self.w_self_n),
            ("cross_r_to_n", &self.w_cross_r_to_n),
            ("cross_n_to_r", &self.w_cross_n_to_r),
        ]
    }
}

/// Gate a stream by its own mask: returns (x_hat, mask).
pub fn self_attend<F: Scalar>(
    x: &Tensor<F>,
    w_self: &ConvKernel<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let pre = crate::kernels::conv2d_fast(x, w_self)?;
    let mask = crate::tensor::activation(crate::tensor::Activation::Sigmoid, &pre);
    let x_hat = elementwise(ElemOp::Mul, x, &mask)?;
    Ok((x_hat, mask))
}

/// Compute a mask from the source stream and gate the target stream with it:
/// returns (x_tilde_target, mask).
pub fn cross_attend<F: Scalar>(
    x_hat_source: &Tensor<F>,
    x_hat_target: &Tensor<F>,
    w_cross: &ConvKernel<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let pre = crate::kernels::conv2d_fast(x_hat_source, w_cross)?;
    let mask = crate::tensor::activation(crate::tensor::Activation::Sigmoid, &pre);
    let x_tilde = elementwise(ElemOp::Mul, x_hat_target, &mask)?;
    Ok((x_tilde, mask))
}

/// Elementwise-additive fusion of the two attended streams.
pub fn fuse<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    elementwise(ElemOp::Add, a, b)
}

/// Every intermediate of one block forward; also the backward context.
pub struct ProcaTrace<F> {
    conv_self_r: ConvCtx<F>,
    sig_self_r: SigmoidCtx<F>,
    mul_self_r: MulCtx<F>,
    conv_self_n: ConvCtx<F>,
    sig_self_n: SigmoidCtx<F>,
    mul_self_n: MulCtx<F>,
    conv_cross_rn: ConvCtx<F>,
    sig_cross_rn: SigmoidCtx<F>,
    mul_cross_n: MulCtx<F>,
    conv_cross_nr: ConvCtx<F>,
    sig_cross_nr: SigmoidCtx<F>,
    mul_cross_r: MulCtx<F>,
    pub a_r: Tensor<F>,
    pub a_n: Tensor<F>,
    pub a_r_to_n: Tensor<F>,
    pub a_n_to_r: Tensor<F>,
    pub x_hat_r: Tensor<F>,
    pub x_hat_n: Tensor<F>,
    pub x_tilde_r: Tensor<F>,
    pub x_tilde_n: Tensor<F>,
    pub fused: Tensor<F>,
}

/// Full block: self attention on both streams, crossed masks, additive
/// fusion. Inputs must share shape and match the kernel channel count.
pub fn proca_forward<F: Scalar>(
    x_r: &Tensor<F>,
    x_n: &Tensor<F>,
    p: &ProcaParams<F>,
) -> Result<ProcaTrace<F>> {
    if x_r.shape() != x_n.shape() {
        return Err(Error::ShapeMismatch {
            op: "proca_forward",
            left: format!("{:?}", x_r.shape()),
            right: format!("{:?}", x_n.shape()),
        });
    }
    let (pre_r, conv_self_r) = conv_forward(x_r, &p.w_self_r)?;
    let (a_r, sig_self_r) = sigmoid_forward(&pre_r);
    let (x_hat_r, mul_self_r) = mul_forward(x_r, &a_r)?;

    let (pre_n, conv_self_n) = conv_forward(x_n, &p.w_self_n)?;
    let (a_n, sig_self_n) = sigmoid_forward(&pre_n);
    let (x_hat_n, mul_self_n) = mul_forward(x_n, &a_n)?;

    // Mask from R applied to N, and vice versa.
    let (pre_rn, conv_cross_rn) = conv_forward(&x_hat_r, &p.w_cross_r_to_n)?;
    let (a_r_to_n, sig_cross_rn) = sigmoid_forward(&pre_rn);
    let (x_tilde_n, mul_cross_n) = mul_forward(&x_hat_n, &a_r_to_n)?;

    let (pre_nr, conv_cross_nr) = conv_forward(&x_hat_n, &p.w_cross_n_to_r)?;
    let (a_n_to_r, sig_cross_nr) = sigmoid_forward(&pre_nr);
    let (x_tilde_r, mul_cross_r) = mul_forward(&x_hat_r, &a_n_to_r)?;

    let fused = fuse(&x_tilde_r, &x_tilde_n)?;
    Ok(ProcaTrace {
        conv_self_r,
        sig_self_r,
        mul_self_r,
        conv_self_n,
        sig_self_n,
        mul_self_n,
        conv_cross_rn,
        sig_cross_rn,
        mul_cross_n,
        conv_cross_nr,
        sig_cross_nr,
        mul_cross_r,
        a_r,
        a_n,
        a_r_to_n,
        a_n_to_r,
        x_hat_r,
        x_hat_n,
        x_tilde_r,
        x_tilde_n,
        fused,
    })
}

pub struct ProcaGrads<F> {
    pub self_r: KernelGrad<F>,
    pub self_n: KernelGrad<F>,
    pub cross_r_to_n: KernelGrad<F>,
    pub cross_n_to_r: KernelGrad<F>,
}

/// Backward through one block. The fused output and the two attended
/// streams are all consumers downstream, so each may carry an upstream
/// gradient; absent ones count as zero.
pub fn proca_backward<F: Scalar>(
    p: &ProcaParams<F>,
    trace: &ProcaTrace<F>,
    d_fused: Option<&Tensor<F>>,
    d_tilde_r: Option<&Tensor<F>>,
    d_tilde_n: Option<&Tensor<F>>,
) -> Result<(Tensor<F>, Tensor<F>, ProcaGrads<F>)> {
    let shape = trace.fused.shape();
    let add_opt = |base: Option<&Tensor<F>>, extra: Option<&Tensor<F>>| -> Result<Tensor<F>> {
        match (base, extra) {
            (Some(a), Some(b)) => elementwise(ElemOp::Add, a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a.clone()),
            (None, None) => Ok(Tensor::zeros(shape)),
        }
    };
    // Fusion is addition: d_fused passes through to both tilde streams.
    let d_xt_r = add_opt(d_fused, d_tilde_r)?;
    let d_xt_n = add_opt(d_fused, d_tilde_n)?;

    // x_tilde_r = x_hat_r * a_n_to_r
    let (d_hat_r_direct, d_a_nr) = mul_backward(&trace.mul_cross_r, &d_xt_r)?;
    let d_pre_nr = sigmoid_backward(&trace.sig_cross_nr, &d_a_nr)?;
    let (d_hat_n_from_nr, g_cross_n_to_r) = conv_backward(&p.w_cross_n_to_r, &trace.conv_cross_nr, &d_pre_nr)?;

    // x_tilde_n = x_hat_n * a_r_to_n
    let (d_hat_n_direct, d_a_rn) = mul_backward(&trace.mul_cross_n, &d_xt_n)?;
    let d_pre_rn = sigmoid_backward(&trace.sig_cross_rn, &d_a_rn)?;
    let (d_hat_r_from_rn, g_cross_r_to_n) = conv_backward(&p.w_cross_r_to_n, &trace.conv_cross_rn, &d_pre_rn)?;

    let d_hat_r = elementwise(ElemOp::Add, &d_hat_r_direct, &d_hat_r_from_rn)?;
    let d_hat_n = elementwise(ElemOp::Add, &d_hat_n_direct, &d_hat_n_from_nr)?;

    // x_hat_r = x_r * a_r
    let (d_xr_direct, d_a_r) = mul_backward(&trace.mul_self_r, &d_hat_r)?;
    let d_pre_r = sigmoid_backward(&trace.sig_self_r, &d_a_r)?;
    let (d_xr_from_mask, g_self_r) = conv_backward(&p.w_self_r, &trace.conv_self_r, &d_pre_r)?;
    let d_x_r = elementwise(ElemOp::Add, &d_xr_direct, &d_xr_from_mask)?;

    // x_hat_n = x_n * a_n
    let (d_xn_direct, d_a_n) = mul_backward(&trace.mul_self_n, &d_hat_n)?;
    let d_pre_n = sigmoid_backward(&trace.sig_self_n, &d_a_n)?;
    let (d_xn_from_mask, g_self_n) = conv_backward(&p.w_self_n, &trace.conv_self_n, &d_pre_n)?;
    let d_x_n = elementwise(ElemOp::Add, &d_xn_direct, &d_xn_from_mask)?;

    Ok((
        d_x_r,
        d_x_n,
        ProcaGrads {
            self_r: g_self_r,
            self_n: g_self_n,
            cross_r_to_n: g_cross_r_to_n,
            cross_n_to_r: g_cross_n_to_r,
        },
    ))
}

//! Dense rank-4 tensors in (batch, channel, height, width) layout,
//! row-major contiguous storage.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `[n, c, h, w]`
pub type Shape = [usize; 4];

fn shape_len(s: Shape) -> usize {
    s[0] * s[1] * s[2] * s[3]
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Shape,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![F::zero(); shape_len(shape)],
        }
    }

    pub fn full(shape: Shape, value: F) -> Self {
        Tensor {
            shape,
            data: vec![value; shape_len(shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<F>) -> Result<Self> {
        if data.len() != shape_len(shape) {
            return Err(Error::DataLength {
                op: "tensor",
                expected: shape_len(shape),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform draws in `[lo, hi)`; consumes one f64 per element.
    pub fn uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        fill_uniform(rng, t.data_mut(), lo, hi);
        t
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> F {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: F) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Elements of one batch sample.
    pub fn sample(&self, n: usize) -> &[F] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * len..(n + 1) * len]
    }

    /// One (sample, channel) plane of `h*w` elements.
    pub fn plane(&self, n: usize, c: usize) -> &[F] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor<F>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: format!("{:?}", self.shape),
                right: format!("{:?}", other.shape),
            });
        }
        Ok(())
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Fill `dst` with uniform draws in `[lo, hi)`, one f64 per element, in
/// index order. Used by both tensor construction and parameter init so the
/// draw order is pinned.
pub fn fill_uniform<F: Scalar, R: Rng>(rng: &mut R, dst: &mut [F], lo: f64, hi: f64) {
    for v in dst {
        let u: f64 = rng.gen();
        *v = F::from_f64(lo + u * (hi - lo));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Mul,
}

/// Elementwise binary op over tensors of identical shape.
pub fn elementwise<F: Scalar>(op: ElemOp, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    a.check_same_shape(b, "elementwise")?;
    let data = match op {
        ElemOp::Add => a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| x + y)
            .collect(),
        ElemOp::Mul => a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| x * y)
            .collect(),
    };
    Ok(Tensor {
        shape: a.shape,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Split on sign so exp never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn relu_scalar<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

pub fn activation<F: Scalar>(f: Activation, x: &Tensor<F>) -> Tensor<F> {
    match f {
        Activation::Relu => x.map(relu_scalar),
        Activation::Sigmoid => x.map(sigmoid_scalar),
    }
}

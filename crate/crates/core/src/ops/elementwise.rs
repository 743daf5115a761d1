//! Elementwise activations and broadcasting binary arithmetic.

use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Add,
    Mul,
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

/// `scale * a + shift`, elementwise.
pub fn affine(a: &Tensor, scale: f64, shift: f64) -> Tensor {
    a.map(|v| scale * v + shift)
}

/// Checks that `b` broadcasts against `a`: every extent of `b` equals `a`'s or is 1.
pub fn check_broadcast(a: Shape, b: Shape) -> Result<()> {
    for d in 0..4 {
        if b[d] != a[d] && b[d] != 1 {
            return Err(shape_err!("cannot broadcast {b:?} against {a:?}"));
        }
    }
    Ok(())
}

/// Index into a broadcast operand for the element of `a` at `(n, c, y, x)`.
#[inline]
fn bidx(b: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    let n = if b[0] == 1 { 0 } else { n };
    let c = if b[1] == 1 { 0 } else { c };
    let y = if b[2] == 1 { 0 } else { y };
    let x = if b[3] == 1 { 0 } else { x };
    ((n * b[1] + c) * b[2] + y) * b[3] + x
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    check_broadcast(a.shape(), b.shape())?;
    let [n, c, h, w] = a.shape();
    let bs = b.shape();
    let mut out = a.clone();
    let mut i = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = &mut out.data_mut()[i];
                    *v = f(*v, b.data()[bidx(bs, ni, ci, y, x)]);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, |x, y| x * y)
}

/// Dispatch over the four elementwise kinds; `b` is required for the binary ones.
pub fn pointwise(kind: Pointwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (kind, b) {
        (Pointwise::Relu, _) => Ok(relu(a)),
        (Pointwise::Sigmoid, _) => Ok(sigmoid(a)),
        (Pointwise::Add, Some(b)) => add(a, b),
        (Pointwise::Mul, Some(b)) => mul(a, b),
        (_, None) => Err(shape_err!("{kind:?} needs a second operand")),
    }
}

/// Sums `grad` (shaped like the broadcast result) down to `target` extents.
pub fn reduce_to(grad: &Tensor, target: Shape) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let [n, c, h, w] = grad.shape();
    let mut out = Tensor::zeros(target);
    let mut i = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[bidx(target, ni, ci, y, x)] += grad.data()[i];
                    i += 1;
                }
            }
        }
    }
    out
}

/// Gradient of `a * b` with respect to `b`, reduced to `b`'s shape.
pub fn mul_grad_rhs(a: &Tensor, grad: &Tensor, b_shape: Shape) -> Tensor {
    let prod = grad.zip_map(a, |g, x| g * x).expect("same shape");
    reduce_to(&prod, b_shape)
}

/// Gradient of `a * b` with respect to `a` (the full-shape operand).
pub fn mul_grad_lhs(b: &Tensor, grad: &Tensor) -> Tensor {
    broadcast_binary(grad, b, |g, y| g * y).expect("validated in forward")
}

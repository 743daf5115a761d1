//! Bilinear resizing with half-pixel centers and edge clamping.
//!
//! Output pixel `d` reads source coordinate `(d + 0.5) * in/out - 0.5`,
//! clamped to `[0, in - 1]`, and interpolates its two integer neighbours.

use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(arg_err!("resize target {out_h}x{out_w} must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(arg_err!("cannot resize an empty {h}x{w} plane"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = input.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
                    let bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
                    dst[oy * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `bilinear_resize`: scatters `grad` back onto an `in_h`×`in_w` grid.
pub fn bilinear_resize_backward(grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let [n, c, out_h, out_w] = grad.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return grad.clone();
    }
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad.plane(ni, ci);
            let dst = dx.plane_mut(ni, ci);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let v = g[oy * out_w + ox];
                    dst[a.lo * in_w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
                    dst[a.lo * in_w + b.hi] += v * (1.0 - a.frac) * b.frac;
                    dst[a.hi * in_w + b.lo] += v * a.frac * (1.0 - b.frac);
                    dst[a.hi * in_w + b.hi] += v * a.frac * b.frac;
                }
            }
        }
    }
    dx
}

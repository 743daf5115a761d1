//! Channel concatenation and spatial pad/crop.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Concatenates along channels, `a`'s channels first.
pub fn channel_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(shape_err!(
            "channel concat needs equal batch and spatial extents, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * hw..(n + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[n * cb * hw..(n + 1) * cb * hw]);
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}

/// Zero-pads at the bottom and right up to `h`×`w`.
pub fn pad_bottom_right(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = input.shape();
    if h < ih || w < iw {
        return Err(shape_err!("pad target {h}x{w} smaller than input {ih}x{iw}"));
    }
    Ok(Tensor::from_fn([n, c, h, w], |ni, ci, y, x| {
        if y < ih && x < iw {
            input.at(ni, ci, y, x)
        } else {
            0.0
        }
    }))
}

/// The `h`×`w` window whose top-left corner is `(top, left)`.
pub fn crop(input: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = input.shape();
    if top + h > ih || left + w > iw {
        return Err(shape_err!(
            "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw} input"
        ));
    }
    Ok(Tensor::from_fn([n, c, h, w], |ni, ci, y, x| input.at(ni, ci, top + y, left + x)))
}

/// Adjoint of `crop`.
pub fn uncrop(grad: &Tensor, top: usize, left: usize, ih: usize, iw: usize) -> Tensor {
    let [n, c, h, w] = grad.shape();
    let mut out = Tensor::zeros([n, c, ih, iw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ni, ci, top + y, left + x, grad.at(ni, ci, y, x));
                }
            }
        }
    }
    out
}

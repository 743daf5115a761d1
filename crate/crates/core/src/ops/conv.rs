//! Standard 2-D convolution (cross-correlation, zero padding).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Shape, Tensor};

/// Output extent of a strided, padded window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(arg_err!("stride must be at least 1"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(shape_err!(
            "kernel {kernel} larger than padded input {padded} (input {input}, padding {padding})"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, bias: Option<Shape>, stride: usize, padding: usize) -> Result<Self> {
        let [n, c, h, w] = input;
        let [co, ci, kh, kw] = weight;
        if c != ci {
            return Err(shape_err!(
                "conv input has {c} channels but weight {weight:?} expects {ci}"
            ));
        }
        if let Some(b) = bias {
            if b != [1, co, 1, 1] && b != [co, 1, 1, 1] {
                return Err(shape_err!("conv bias {b:?} does not hold {co} output channels"));
            }
        }
        let ho = conv_out_extent(h, kh, stride, padding)?;
        let wo = conv_out_extent(w, kw, stride, padding)?;
        if ho == 0 || wo == 0 {
            return Err(shape_err!("conv output extent is zero"));
        }
        Ok(Self { n, ci, h, w, co, kh, kw, ho, wo, stride, padding })
    }

    pub fn out_shape(&self) -> Shape {
        [self.n, self.co, self.ho, self.wo]
    }

    pub fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one sample `x[ci,h,w]` into `col[ci*kh*kw, ho*wo]`.
fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let ohw = g.out_hw();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `col` back into `dx`, accumulating overlapping windows.
fn col2im(col: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let ohw = g.out_hw();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W · col(x[n]) + b`, the shared tail of standard and deformable convolution.
pub(crate) fn apply_weight(
    g: &ConvGeometry,
    weight: &Tensor,
    bias: Option<&Tensor>,
    col_of: impl Fn(usize, &mut [f64]),
    pointwise_input: Option<&Tensor>,
) -> Tensor {
    let ohw = g.out_hw();
    let rows = g.col_rows();
    let mut out = Tensor::zeros(g.out_shape());
    let mut col = vec![0.0; if pointwise_input.is_some() { 0 } else { rows * ohw }];
    for ni in 0..g.n {
        let dst = &mut out.data_mut()[ni * g.co * ohw..(ni + 1) * g.co * ohw];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(ohw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let src: &[f64] = match pointwise_input {
            Some(x) => &x.data()[ni * rows * ohw..(ni + 1) * rows * ohw],
            None => {
                col_of(ni, &mut col);
                &col
            }
        };
        gemm_nn(weight.data(), src, dst, g.co, rows, ohw);
    }
    out
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.map(|b| b.shape()), stride, padding)?;
    let chw = g.ci * g.h * g.w;
    let pointwise = g.is_pointwise().then_some(input);
    Ok(apply_weight(
        &g,
        weight,
        bias,
        |ni, col| im2col(&input.data()[ni * chw..(ni + 1) * chw], &g, col),
        pointwise,
    ))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of `conv2d` given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), None, stride, padding)?;
    if grad_out.shape() != g.out_shape() {
        return Err(shape_err!("conv grad {:?} vs output {:?}", grad_out.shape(), g.out_shape()));
    }
    let ohw = g.out_hw();
    let rows = g.col_rows();
    let chw = g.ci * g.h * g.w;
    let pointwise = g.is_pointwise();

    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col: Vec<f64> = vec![0.0; if pointwise { 0 } else { rows * ohw }];
    let mut dcol: Vec<f64> = vec![0.0; if need_input && !pointwise { rows * ohw } else { 0 }];

    for ni in 0..g.n {
        let go = &grad_out.data()[ni * g.co * ohw..(ni + 1) * g.co * ohw];
        let x = &input.data()[ni * chw..(ni + 1) * chw];
        let colv: &[f64] = if pointwise {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm_nt(go, colv, dw.data_mut(), g.co, ohw, rows);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[ni * chw..(ni + 1) * chw];
            if pointwise {
                gemm_tn(weight.data(), go, dxs, rows, g.co, ohw);
            } else {
                dcol.fill(0.0);
                gemm_tn(weight.data(), go, &mut dcol, rows, g.co, ohw);
                col2im(&dcol, &g, dxs);
            }
        }
    }

    let bias = has_bias.then(|| {
        let mut db = Tensor::zeros([1, g.co, 1, 1]);
        for ni in 0..g.n {
            for co in 0..g.co {
                let s: f64 = grad_out.plane(ni, co).iter().sum();
                db.data_mut()[co] += s;
            }
        }
        db
    });
    Ok(ConvGrads { input: dx, weight: dw, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Six nested loops over the cross-correlation definition.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize) -> Tensor {
        let [n, ci, h, wd] = x.shape();
        let [co, _, kh, kw] = w.shape();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        Tensor::from_fn([n, co, ho, wo], |ni, o, oy, ox| {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (oy * s + i) as isize - p as isize;
                        let ix = (ox * s + j) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at(ni, c, iy as usize, ix as usize) * w.at(o, c, i, j);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = RngState::new(11);
        let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &w, None, 1, 1)) < 1e-12);
    }

    #[test]
    fn exhaustive_small_shape_sweep() {
        let mut rng = RngState::new(5);
        for n in 1..=4 {
            for c in 1..=4 {
                for hw in [1usize, 2, 3, 5, 8] {
                    for k in [1usize, 3] {
                        for s in [1usize, 2] {
                            let p = k / 2;
                            let co = 1 + (n + c) % 4;
                            let x = Tensor::randn([n, c, hw, hw + 1], 1.0, &mut rng);
                            let w = Tensor::randn([co, c, k, k], 1.0, &mut rng);
                            let b = Tensor::randn([1, co, 1, 1], 1.0, &mut rng);
                            let y = conv2d(&x, &w, Some(&b), s, p).unwrap();
                            assert!(y.max_abs_diff(&naive_conv(&x, &w, Some(&b), s, p)) < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 5, 5]), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), None, 0, 1).is_err());
    }

    #[test]
    fn output_shape_formula() {
        let x = Tensor::zeros([2, 3, 9, 7]);
        let y = conv2d(&x, &Tensor::zeros([5, 3, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), [2, 5, 5, 4]);
    }
}

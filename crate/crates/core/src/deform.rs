//! Deformable convolution (v1: per-tap offsets, no modulation mask).
//!
//! Each output location `p` and kernel tap `k = i * kw + j` samples the input
//! at `p * stride - padding + (i, j) + Δk`, where `Δk` comes from an offset
//! field of shape `[N, 2*kh*kw, Ho, Wo]`: channel `2k` is the x (column)
//! displacement and channel `2k + 1` the y (row) displacement, in pixels.
//! Sampling is bilinear with zero padding: a point contributes nothing once it
//! lies at or beyond one pixel outside the plane. One offset pair per tap is
//! shared by all input channels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm_nt, gemm_tn};
use crate::ops::conv::{apply_weight, ConvGeometry};
use crate::tensor::Tensor;

/// A validated offset tensor paired with the kernel it displaces.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    tensor: Tensor,
    kh: usize,
    kw: usize,
}

impl OffsetField {
    pub fn new(tensor: Tensor, kh: usize, kw: usize) -> Result<Self> {
        if tensor.channels() != 2 * kh * kw {
            return Err(shape_err!(
                "offset field has {} channels, a {kh}x{kw} kernel needs {}",
                tensor.channels(),
                2 * kh * kw
            ));
        }
        tensor.ensure_finite("offset field")?;
        Ok(Self { tensor, kh, kw })
    }

    /// Every tap displaced by the same `(dx, dy)` at every location.
    pub fn constant(n: usize, kh: usize, kw: usize, h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let tensor = Tensor::from_fn([n, 2 * kh * kw, h, w], |_, c, _, _| if c % 2 == 0 { dx } else { dy });
        Self { tensor, kh, kw }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }
}

/// Four-neighbour bilinear stencil of one fractional coordinate.
#[derive(Debug, Clone, Copy, Default)]
struct Stencil {
    idx: [usize; 4],
    /// Weights of the corners (y0,x0), (y0,x1), (y1,x0), (y1,x1); zero for out-of-bounds corners.
    wt: [f64; 4],
    /// Whether each corner lies inside the plane.
    inside: [bool; 4],
    ly: f64,
    lx: f64,
}

impl Stencil {
    fn at(h: usize, w: usize, y: f64, x: f64) -> Stencil {
        let mut s = Stencil::default();
        if y <= -1.0 || y >= h as f64 || x <= -1.0 || x >= w as f64 {
            return s;
        }
        let y0 = libm::floor(y);
        let x0 = libm::floor(x);
        let ly = y - y0;
        let lx = x - x0;
        s.ly = ly;
        s.lx = lx;
        let corners = [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)];
        let weights = [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx];
        for (k, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0.0 && cx >= 0.0 && cy < h as f64 && cx < w as f64 {
                s.idx[k] = cy as usize * w + cx as usize;
                s.wt[k] = weights[k];
                s.inside[k] = true;
            }
        }
        s
    }

    #[inline]
    fn sample(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if self.inside[k] {
                v += self.wt[k] * plane[self.idx[k]];
            }
        }
        v
    }

    /// Partial derivatives of the sampled value with respect to `(x, y)`.
    #[inline]
    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let v = |k: usize| if self.inside[k] { plane[self.idx[k]] } else { 0.0 };
        let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
        let dx = (1.0 - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        let dy = (1.0 - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        (dx, dy)
    }
}

/// Bilinear interpolation of an `h`×`w` row-major plane at column `x`, row `y`,
/// with zero padding outside the plane.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> Result<f64> {
    if x.is_nan() || y.is_nan() {
        return Err(Error::NonFinite(alloc::format!("sample coordinate ({x}, {y})")));
    }
    if plane.len() != h * w {
        return Err(shape_err!("plane of {} values is not {h}x{w}", plane.len()));
    }
    Ok(Stencil::at(h, w, y, x).sample(plane))
}

fn check(geom: &ConvGeometry, offsets: &Tensor) -> Result<()> {
    let want = [geom.n, 2 * geom.kh * geom.kw, geom.ho, geom.wo];
    if offsets.shape() != want {
        return Err(shape_err!(
            "offset field {:?} does not match expected {:?} for this deformable kernel",
            offsets.shape(),
            want
        ));
    }
    Ok(())
}

/// Stencils for sample `ni`, indexed `[tap * Ho*Wo + location]`.
fn stencils(geom: &ConvGeometry, offsets: &Tensor, ni: usize) -> Vec<Stencil> {
    let taps = geom.kh * geom.kw;
    let ohw = geom.out_hw();
    let mut out = Vec::with_capacity(taps * ohw);
    for i in 0..geom.kh {
        for j in 0..geom.kw {
            let k = i * geom.kw + j;
            let ox_plane = offsets.plane(ni, 2 * k);
            let oy_plane = offsets.plane(ni, 2 * k + 1);
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let l = oy * geom.wo + ox;
                    let y = (oy * geom.stride + i) as f64 - geom.padding as f64 + oy_plane[l];
                    let x = (ox * geom.stride + j) as f64 - geom.padding as f64 + ox_plane[l];
                    out.push(Stencil::at(geom.h, geom.w, y, x));
                }
            }
        }
    }
    out
}

fn deform_im2col(x: &[f64], geom: &ConvGeometry, st: &[Stencil], col: &mut [f64]) {
    let taps = geom.kh * geom.kw;
    let ohw = geom.out_hw();
    let hw = geom.h * geom.w;
    for c in 0..geom.ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for k in 0..taps {
            let row = (c * taps + k) * ohw;
            for (l, s) in st[k * ohw..(k + 1) * ohw].iter().enumerate() {
                col[row + l] = s.sample(plane);
            }
        }
    }
}

pub fn deform_conv2d(
    input: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), bias.map(|b| b.shape()), stride, padding)?;
    check(&geom, offsets)?;
    let chw = geom.ci * geom.h * geom.w;
    Ok(apply_weight(
        &geom,
        weight,
        bias,
        |ni, col| {
            let st = stencils(&geom, offsets, ni);
            deform_im2col(&input.data()[ni * chw..(ni + 1) * chw], &geom, &st, col);
        },
        None,
    ))
}

pub struct DeformGrads {
    pub input: Option<Tensor>,
    pub offsets: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn deform_conv2d_backward(
    input: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input: bool,
    need_offsets: bool,
) -> Result<DeformGrads> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), None, stride, padding)?;
    check(&geom, offsets)?;
    if grad_out.shape() != geom.out_shape() {
        return Err(shape_err!("deform grad {:?} vs output {:?}", grad_out.shape(), geom.out_shape()));
    }
    let taps = geom.kh * geom.kw;
    let ohw = geom.out_hw();
    let rows = geom.col_rows();
    let hw = geom.h * geom.w;
    let chw = geom.ci * hw;

    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut doff = need_offsets.then(|| Tensor::zeros(offsets.shape()));
    let mut col = vec![0.0; rows * ohw];
    let mut dcol = vec![0.0; rows * ohw];

    for ni in 0..geom.n {
        let x = &input.data()[ni * chw..(ni + 1) * chw];
        let go = &grad_out.data()[ni * geom.co * ohw..(ni + 1) * geom.co * ohw];
        let st = stencils(&geom, offsets, ni);
        deform_im2col(x, &geom, &st, &mut col);
        gemm_nt(go, &col, dw.data_mut(), geom.co, ohw, rows);
        if !need_input && !need_offsets {
            continue;
        }
        dcol.fill(0.0);
        gemm_tn(weight.data(), go, &mut dcol, rows, geom.co, ohw);
        for c in 0..geom.ci {
            let plane = &x[c * hw..(c + 1) * hw];
            for k in 0..taps {
                let row = (c * taps + k) * ohw;
                for l in 0..ohw {
                    let g = dcol[row + l];
                    if g == 0.0 {
                        continue;
                    }
                    let s = &st[k * ohw + l];
                    if let Some(dx) = dx.as_mut() {
                        let dplane = &mut dx.data_mut()[ni * chw + c * hw..ni * chw + (c + 1) * hw];
                        for q in 0..4 {
                            if s.inside[q] {
                                dplane[s.idx[q]] += s.wt[q] * g;
                            }
                        }
                    }
                    if let Some(doff) = doff.as_mut() {
                        let (gx, gy) = s.coord_grad(plane);
                        let bx = doff.offset(ni, 2 * k, 0, 0) + l;
                        let by = doff.offset(ni, 2 * k + 1, 0, 0) + l;
                        doff.data_mut()[bx] += g * gx;
                        doff.data_mut()[by] += g * gy;
                    }
                }
            }
        }
    }

    let bias = has_bias.then(|| {
        Tensor::from_fn([1, geom.co, 1, 1], |_, co, _, _| {
            (0..geom.n).map(|ni| grad_out.plane(ni, co).iter().sum::<f64>()).sum()
        })
    });
    Ok(DeformGrads { input: dx, offsets: doff, weight: dw, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv2d;
    use crate::rng::RngState;

    fn plane2x2() -> [f64; 4] {
        [0.0, 1.0, 2.0, 3.0]
    }

    /// Enumerates the four integer neighbours and their weights directly.
    fn four_weight_oracle(p: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let mut acc = 0.0;
        for (cy, cx) in [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)] {
            let wgt = (1.0 - (y - cy).abs()) * (1.0 - (x - cx).abs());
            if cy >= 0.0 && cx >= 0.0 && (cy as usize) < h && (cx as usize) < w {
                acc += wgt * p[cy as usize * w + cx as usize];
            }
        }
        acc
    }

    #[test]
    fn integer_coordinates_hit_pixels() {
        let p = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(bilinear_sample(&p, 3, 3, 1.0, 1.0).unwrap(), 4.0);
        assert_eq!(bilinear_sample(&p, 3, 3, 2.0, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn center_of_cell_is_mean() {
        assert_eq!(bilinear_sample(&plane2x2(), 2, 2, 0.5, 0.5).unwrap(), 1.5);
    }

    #[test]
    fn partially_outside_uses_in_bounds_neighbours() {
        let p = plane2x2();
        for &(x, y) in &[(-0.5, 0.0), (0.0, -0.5), (1.5, 1.25), (-0.25, 1.75), (0.3, 0.9)] {
            let got = bilinear_sample(&p, 2, 2, x, y).unwrap();
            assert!((got - four_weight_oracle(&p, 2, 2, x, y)).abs() < 1e-15, "({x},{y})");
        }
        assert_eq!(bilinear_sample(&p, 2, 2, -1.0, 0.0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&p, 2, 2, 0.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn nan_coordinate_is_an_error() {
        assert!(bilinear_sample(&plane2x2(), 2, 2, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn zero_offsets_reduce_to_conv() {
        let mut rng = RngState::new(21);
        let x = Tensor::randn([2, 3, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn([1, 4, 1, 1], 1.0, &mut rng);
        for stride in [1, 2] {
            let ref_out = conv2d(&x, &w, Some(&b), stride, 1).unwrap();
            let [_, _, ho, wo] = ref_out.shape();
            let off = OffsetField::constant(2, 3, 3, ho, wo, 0.0, 0.0);
            let y = deform_conv2d(&x, off.tensor(), &w, Some(&b), stride, 1).unwrap();
            assert!(y.max_abs_diff(&ref_out) < 1e-12);
        }
    }

    #[test]
    fn integer_offset_matches_shifted_input() {
        let mut rng = RngState::new(22);
        let x = Tensor::randn([1, 2, 8, 8], 1.0, &mut rng);
        let w = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
        let off = OffsetField::constant(1, 3, 3, 8, 8, 1.0, 0.0);
        let y = deform_conv2d(&x, off.tensor(), &w, None, 1, 1).unwrap();
        // input shifted left by one column: shifted(x) = input(x + 1)
        let shifted = Tensor::from_fn([1, 2, 8, 8], |n, c, yy, xx| if xx + 1 < 8 { x.at(n, c, yy, xx + 1) } else { 0.0 });
        let z = conv2d(&shifted, &w, None, 1, 1).unwrap();
        for yy in 1..7 {
            for xx in 1..6 {
                for c in 0..2 {
                    assert!((y.at(0, c, yy, xx) - z.at(0, c, yy, xx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_pixel_offset_on_ramp() {
        let x = Tensor::from_fn([1, 1, 4, 6], |_, _, _, xx| 2.0 * xx as f64 + 1.0);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let off = OffsetField::constant(1, 1, 1, 4, 6, 0.5, 0.0);
        let y = deform_conv2d(&x, off.tensor(), &w, None, 1, 0).unwrap();
        for yy in 0..4 {
            for xx in 0..5 {
                assert!((y.at(0, 0, yy, xx) - (2.0 * (xx as f64 + 0.5) + 1.0)).abs() < 1e-12);
            }
            // last column: right neighbour is padding, half weight survives
            assert!((y.at(0, 0, yy, 5) - 0.5 * 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_consistency() {
        let mut rng = RngState::new(23);
        let x = Tensor::randn([1, 2, 9, 9], 1.0, &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], 1.0, &mut rng);
        let off = Tensor::uniform([1, 18, 9, 9], -0.8, 0.8, &mut rng);
        let base = deform_conv2d(&x, &off, &w, None, 1, 1).unwrap();
        // shift input right by 2: shifted(x) = input(x - 2); sampling at +2 restores it
        let shifted = Tensor::from_fn([1, 2, 9, 9], |n, c, yy, xx| if xx >= 2 { x.at(n, c, yy, xx - 2) } else { 0.0 });
        let shift = Tensor::from_fn([1, 18, 9, 9], |_, c, _, _| if c % 2 == 0 { 2.0 } else { 0.0 });
        let moved = off.zip_map(&shift, |a, b| a + b).unwrap();
        let y = deform_conv2d(&shifted, &moved, &w, None, 1, 1).unwrap();
        for yy in 0..9 {
            for xx in 2..5 {
                for c in 0..3 {
                    assert!((y.at(0, c, yy, xx) - base.at(0, c, yy, xx)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn offset_shape_checked() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        assert!(deform_conv2d(&x, &Tensor::zeros([1, 8, 4, 4]), &w, None, 1, 1).is_err());
        assert!(deform_conv2d(&x, &Tensor::zeros([1, 18, 3, 4]), &w, None, 1, 1).is_err());
        assert!(OffsetField::new(Tensor::zeros([1, 4, 2, 2]), 3, 3).is_err());
    }
}

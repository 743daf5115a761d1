//! Shared spatial-attention head and the pairwise fusion chain over a pyramid
//! of rescaled inputs.
//!
//! For ascending scales `S₁ < … < S_N` the chain keeps an accumulator
//! `acc₁ = G(S₁)` and folds `acc_{i+1} = acc_i·α_i + G(S_{i+1})·(1 − α_i)`,
//! with `acc_i` and `α_i` resized to scale `i+1` first. `α_i` comes from the
//! penultimate features of the lower scale of each pair.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{arg_err, shape_err, Result, StageContext};
use crate::network::config::INPUT_DIVISOR;
use crate::network::{conv_bias, conv_bn_relu, stdc_align_forward, NetworkParams, Session};
use crate::ops::{self, BnMode};
use crate::tensor::Tensor;

/// How each pair is blended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    /// `α` from the shared attention head.
    Learned,
    /// A constant `α` everywhere; the attention head is not evaluated.
    Fixed(f64),
}

/// Rejects empty, non-positive, non-finite or non-ascending scale lists.
pub fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(arg_err!("scale list is empty"));
    }
    if let Some(s) = scales.iter().find(|s| !s.is_finite() || **s <= 0.0) {
        return Err(arg_err!("scale {s} is not a positive number"));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(arg_err!("scales {scales:?} are not strictly ascending"));
    }
    Ok(())
}

/// `round(x · s)`, at least 1.
pub fn scaled_extent(x: usize, s: f64) -> usize {
    (libm::round(x as f64 * s) as usize).max(1)
}

/// Smallest multiple of the network divisor not below `x`.
pub fn padded_extent(x: usize) -> usize {
    x.div_ceil(INPUT_DIVISOR) * INPUT_DIVISOR
}

/// Two 3×3 ConvBNReLU stages, a 1×1 conv to one channel, and a sigmoid.
pub fn attention_map_graph(s: &mut Session, penult: NodeId) -> Result<NodeId> {
    let h = conv_bn_relu(s, penult, "attention.0", 1)?;
    let h = conv_bn_relu(s, h, "attention.1", 1)?;
    let z = conv_bias(s, h, "attention.out")?;
    s.graph.sigmoid(z)
}

/// Eval-mode attention map `[N,1,h,w]` for penultimate features.
pub fn attention_map(params: &NetworkParams, penult: &Tensor) -> Result<Tensor> {
    let mut s = Session::new(params, BnMode::Eval);
    let x = s.graph.constant(penult.clone());
    let a = attention_map_graph(&mut s, x)?;
    Ok(s.graph.value(a).clone())
}

fn check_pair(low: [usize; 4], high: [usize; 4], alpha: [usize; 4]) -> Result<()> {
    if low != high {
        return Err(shape_err!("fused logits differ: {low:?} vs {high:?}"));
    }
    if alpha[1] != 1 || (alpha[0], alpha[2], alpha[3]) != (low[0], low[2], low[3]) {
        return Err(shape_err!("attention map {alpha:?} does not cover logits {low:?}"));
    }
    Ok(())
}

/// `low · α + high · (1 − α)`, with single-channel `α` broadcast over classes.
pub fn fuse_pair(low: &Tensor, high: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    check_pair(low.shape(), high.shape(), alpha.shape())?;
    let [n, k, h, w] = low.shape();
    Ok(Tensor::from_fn([n, k, h, w], |ni, c, y, x| {
        let a = alpha.at(ni, 0, y, x);
        low.at(ni, c, y, x) * a + high.at(ni, c, y, x) * (1.0 - a)
    }))
}

pub fn fuse_pair_graph(g: &mut Graph, low: NodeId, high: NodeId, alpha: NodeId) -> Result<NodeId> {
    check_pair(g.shape(low), g.shape(high), g.shape(alpha))?;
    let keep = g.mul(low, alpha)?;
    let rest = g.affine(alpha, -1.0, 1.0)?;
    let take = g.mul(high, rest)?;
    g.add(keep, take)
}

/// One rung of the pyramid.
#[derive(Debug, Clone, Copy)]
pub struct ScaleRun {
    pub scale: f64,
    /// Rescaled extent before padding.
    pub size: (usize, usize),
    /// Extent fed to the network.
    pub padded: (usize, usize),
    /// Logits cropped to `size`.
    pub logits: NodeId,
    pub penult: NodeId,
}

#[derive(Debug, Clone)]
pub struct PyramidNodes {
    pub runs: Vec<ScaleRun>,
    /// `α_i` for each pair, cropped to the lower scale's `size`.
    pub alphas: Vec<NodeId>,
    /// Accumulator at the largest scale, resized to the input extent.
    pub fused: NodeId,
    /// Number of pairwise fusions performed.
    pub fusions: usize,
}

/// Builds the whole pyramid on `s`. The image is a constant.
pub fn multiscale_graph(s: &mut Session, image: &Tensor, scales: &[f64], mode: AttentionMode) -> Result<PyramidNodes> {
    check_scales(scales)?;
    let [_, _, h, w] = image.shape();
    let mut runs = Vec::with_capacity(scales.len());
    for &scale in scales {
        let stage = format!("scale {scale}");
        let size = (scaled_extent(h, scale), scaled_extent(w, scale));
        let padded = (padded_extent(size.0), padded_extent(size.1));
        let rescaled = ops::bilinear_resize(image, size.0, size.1).stage(&stage)?;
        let input = ops::pad_bottom_right(&rescaled, padded.0, padded.1).stage(&stage)?;
        let x = s.graph.constant(input);
        let out = stdc_align_forward(s, x).stage(&stage)?;
        let logits = s.graph.crop(out.logits, 0, 0, size.0, size.1)?;
        runs.push(ScaleRun { scale, size, padded, logits, penult: out.penult });
    }

    let mut alphas = Vec::with_capacity(runs.len().saturating_sub(1));
    for r in &runs[..runs.len() - 1] {
        let a = match mode {
            AttentionMode::Learned => {
                let a = attention_map_graph(s, r.penult).stage("attention")?;
                let a = s.graph.resize(a, r.padded.0, r.padded.1)?;
                s.graph.crop(a, 0, 0, r.size.0, r.size.1)?
            }
            AttentionMode::Fixed(v) => {
                let n = image.batch();
                s.graph.constant(Tensor::full([n, 1, r.size.0, r.size.1], v))
            }
        };
        alphas.push(a);
    }

    let mut acc = runs[0].logits;
    let mut fusions = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        let (th, tw) = r.size;
        let low = s.graph.resize(acc, th, tw)?;
        let alpha = s.graph.resize(alphas[i - 1], th, tw)?;
        acc = fuse_pair_graph(&mut s.graph, low, r.logits, alpha)?;
        fusions += 1;
    }
    let fused = s.graph.resize(acc, h, w)?;
    Ok(PyramidNodes { runs, alphas, fused, fusions })
}

/// Summary of one fused pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub low_scale: f64,
    pub high_scale: f64,
    pub alpha_min: f64,
    pub alpha_mean: f64,
    pub alpha_max: f64,
    /// Largest gap between the accumulator entering this pair and the lower
    /// scale's own logits; zero for the first pair, non-zero when folding
    /// departs from re-evaluating each pair independently.
    pub fold_delta: f64,
}

/// Evaluated pyramid for one image batch.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub scales: Vec<f64>,
    /// Rescaled, padded network inputs.
    pub images: Vec<Tensor>,
    /// Per-scale logits cropped to each rescaled extent.
    pub logits: Vec<Tensor>,
    pub penults: Vec<Tensor>,
    /// Per-pair attention maps at the lower scale's extent.
    pub alphas: Vec<Tensor>,
    pub pairs: Vec<PairStats>,
    /// Fused logits at the original image extent.
    pub fused: Tensor,
    pub fusions: usize,
}

/// Eval-mode multiscale inference.
pub fn multiscale_infer(params: &NetworkParams, image: &Tensor, scales: &[f64], mode: AttentionMode) -> Result<ScalePyramid> {
    let mut s = Session::new(params, BnMode::Eval);
    let nodes = multiscale_graph(&mut s, image, scales, mode)?;
    let g = &s.graph;
    let value = |id: NodeId| g.value(id).clone();
    let logits: Vec<Tensor> = nodes.runs.iter().map(|r| value(r.logits)).collect();
    let alphas: Vec<Tensor> = nodes.alphas.iter().map(|&a| value(a)).collect();

    let mut pairs = Vec::with_capacity(alphas.len());
    let mut acc = logits[0].clone();
    for i in 0..alphas.len() {
        let a = &alphas[i];
        let (th, tw) = nodes.runs[i + 1].size;
        pairs.push(PairStats {
            low_scale: scales[i],
            high_scale: scales[i + 1],
            alpha_min: a.min(),
            alpha_mean: a.mean(),
            alpha_max: a.max(),
            fold_delta: acc.max_abs_diff(&logits[i]),
        });
        let low = ops::bilinear_resize(&acc, th, tw)?;
        let ar = ops::bilinear_resize(a, th, tw)?;
        acc = fuse_pair(&low, &logits[i + 1], &ar)?;
    }
    let images = nodes
        .runs
        .iter()
        .map(|r| {
            let rescaled = ops::bilinear_resize(image, r.size.0, r.size.1)?;
            ops::pad_bottom_right(&rescaled, r.padded.0, r.padded.1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalePyramid {
        scales: scales.to_vec(),
        images,
        penults: nodes.runs.iter().map(|r| value(r.penult)).collect(),
        logits,
        alphas,
        pairs,
        fused: value(nodes.fused),
        fusions: nodes.fusions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_eval, NetworkConfig};
    use crate::rng::RngState;

    fn params(seed: u64) -> NetworkParams {
        let mut cfg = NetworkConfig::toy(3);
        cfg.stage_blocks = [1, 1, 1];
        NetworkParams::init(cfg, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn pair_closed_forms() {
        let low = Tensor::full([1, 2, 2, 2], 0.2);
        let high = Tensor::full([1, 2, 2, 2], 0.6);
        let at = |v| Tensor::full([1, 1, 2, 2], v);
        assert!(fuse_pair(&low, &high, &at(1.0)).unwrap().bit_eq(&low));
        assert!(fuse_pair(&low, &high, &at(0.0)).unwrap().bit_eq(&high));
        assert!(fuse_pair(&low, &high, &at(0.5)).unwrap().data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn pair_shape_errors() {
        let x = Tensor::zeros([1, 2, 2, 2]);
        assert!(fuse_pair(&x, &Tensor::zeros([1, 2, 2, 3]), &Tensor::zeros([1, 1, 2, 2])).is_err());
        assert!(fuse_pair(&x, &x, &Tensor::zeros([1, 2, 2, 2])).is_err());
        assert!(fuse_pair(&x, &x, &Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn scale_validation() {
        assert!(check_scales(&[]).is_err());
        assert!(check_scales(&[1.0, 0.5]).is_err());
        assert!(check_scales(&[0.5, 0.5]).is_err());
        assert!(check_scales(&[0.0, 1.0]).is_err());
        assert!(check_scales(&[0.25, 0.5, 1.0, 1.5, 2.0]).is_ok());
    }

    #[test]
    fn extents() {
        assert_eq!(scaled_extent(64, 0.5), 32);
        assert_eq!(scaled_extent(64, 0.25), 16);
        assert_eq!(scaled_extent(3, 0.1), 1);
        assert_eq!(padded_extent(16), 32);
        assert_eq!(padded_extent(96), 96);
    }

    #[test]
    fn single_scale_is_plain_forward() {
        let p = params(1);
        let img = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut RngState::new(2));
        let ms = multiscale_infer(&p, &img, &[1.0], AttentionMode::Learned).unwrap();
        assert!(ms.fused.bit_eq(&forward_eval(&p, &img).unwrap().logits));
        assert_eq!(ms.fusions, 0);
    }

    #[test]
    fn zeroed_head_gives_half() {
        let mut p = params(3);
        p.get_mut("attention.out.weight").unwrap().data_mut().fill(0.0);
        let penult = Tensor::randn([1, 64, 4, 4], 1.0, &mut RngState::new(4));
        let a = attention_map(&p, &penult).unwrap();
        assert_eq!(a.shape(), [1, 1, 4, 4]);
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_head_returns_low_scale() {
        let mut p = params(5);
        p.get_mut("attention.out.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("attention.out.bias").unwrap().data_mut().fill(1e3);
        let img = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut RngState::new(6));
        let ms = multiscale_infer(&p, &img, &[0.5, 1.0], AttentionMode::Learned).unwrap();
        let want = ops::bilinear_resize(&ms.logits[0], 64, 64).unwrap();
        assert!(ms.fused.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn chain_counts_and_shapes() {
        let p = params(7);
        let img = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut RngState::new(8));
        let ms = multiscale_infer(&p, &img, &[0.25, 0.5, 1.0], AttentionMode::Learned).unwrap();
        assert_eq!(ms.fusions, 2);
        assert_eq!(ms.fused.shape(), [1, 3, 64, 64]);
        assert_eq!(ms.logits[0].shape(), [1, 3, 16, 16]);
        assert_eq!(ms.images[0].shape(), [1, 3, 32, 32]);
        assert_eq!(ms.alphas.len(), 2);
        assert_eq!(ms.pairs[0].fold_delta, 0.0);
        for a in &ms.alphas {
            assert!(a.min() > 0.0 && a.max() < 1.0);
        }
    }

    #[test]
    fn head_parameters_bound_once() {
        let p = params(9);
        let img = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut RngState::new(10));
        let mut s = Session::new(&p, BnMode::Eval);
        multiscale_graph(&mut s, &img, &[0.25, 0.5, 1.0], AttentionMode::Learned).unwrap();
        assert_eq!(s.graph.params().len(), s.bound().len());
        let head = s.bound().keys().filter(|k| k.starts_with("attention.")).count();
        assert_eq!(head, 8);
    }
}

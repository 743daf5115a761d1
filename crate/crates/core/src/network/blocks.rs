//! Building blocks evaluated inside a [`Session`].

use alloc::format;

use super::arch::stdc_unit_widths;
use super::params::Session;
use crate::autodiff::NodeId;
use crate::error::{arg_err, shape_err, Result, StageContext};

/// `conv → batch norm → relu` using `{prefix}.conv.weight` and `{prefix}.bn.*`.
/// Padding keeps odd kernels centred.
pub fn conv_bn_relu(s: &mut Session, x: NodeId, prefix: &str, stride: usize) -> Result<NodeId> {
    let w = s.param(&format!("{prefix}.conv.weight"))?;
    let k = s.graph.shape(w)[2];
    let y = s.graph.conv2d(x, w, None, stride, k / 2).stage(prefix)?;
    let y = s.batch_norm(y, &format!("{prefix}.bn"))?;
    s.graph.relu(y)
}

/// Plain convolution with bias, `{name}.weight` and `{name}.bias`.
pub fn conv_bias(s: &mut Session, x: NodeId, name: &str) -> Result<NodeId> {
    let w = s.param(&format!("{name}.weight"))?;
    let b = s.param(&format!("{name}.bias"))?;
    let k = s.graph.shape(w)[2];
    s.graph.conv2d(x, w, Some(b), 1, k / 2).stage(name)
}

/// Four narrowing units whose outputs are concatenated back to width `cb`.
/// With stride 2 the second unit downsamples and the first unit's output is
/// average-pooled before joining the concat.
pub fn stdc_block(s: &mut Session, x: NodeId, prefix: &str, cb: usize, stride: usize) -> Result<NodeId> {
    if cb == 0 || !cb.is_multiple_of(8) {
        return Err(arg_err!("{prefix}: block width {cb} is not divisible by 8"));
    }
    if stride != 1 && stride != 2 {
        return Err(arg_err!("{prefix}: stride {stride} not in {{1, 2}}"));
    }
    let u0 = conv_bn_relu(s, x, &format!("{prefix}.unit0"), 1)?;
    let u1 = conv_bn_relu(s, u0, &format!("{prefix}.unit1"), stride)?;
    let u2 = conv_bn_relu(s, u1, &format!("{prefix}.unit2"), 1)?;
    let u3 = conv_bn_relu(s, u2, &format!("{prefix}.unit3"), 1)?;
    let skip = if stride == 2 { s.graph.avg_pool2x2(u0).stage(prefix)? } else { u0 };
    let mut out = s.graph.channel_concat(skip, u1).stage(prefix)?;
    out = s.graph.channel_concat(out, u2).stage(prefix)?;
    out = s.graph.channel_concat(out, u3).stage(prefix)?;
    let got = s.graph.shape(out)[1];
    if got != cb {
        let w = stdc_unit_widths(cb);
        return Err(shape_err!("{prefix}: units concatenate to {got} channels, expected {cb} = {w:?}"));
    }
    Ok(out)
}

/// Joins the spatial and semantic streams: concat, 1×1 ConvBNReLU, then a
/// squeeze-excitation gate `feat · σ(W₁ relu(W₀ gap(feat))) + feat`.
pub fn ffm(s: &mut Session, spatial: NodeId, semantic: NodeId, prefix: &str) -> Result<NodeId> {
    let (a, b) = (s.graph.shape(spatial), s.graph.shape(semantic));
    if (a[0], a[2], a[3]) != (b[0], b[2], b[3]) {
        return Err(shape_err!("{prefix}: spatial stream {a:?} and semantic stream {b:?} differ in extent"));
    }
    let cat = s.graph.channel_concat(spatial, semantic)?;
    let feat = conv_bn_relu(s, cat, &format!("{prefix}.fuse"), 1)?;
    let pooled = s.graph.global_avg_pool(feat)?;
    let g0 = conv_bias(s, pooled, &format!("{prefix}.gate0"))?;
    let g0 = s.graph.relu(g0)?;
    let g1 = conv_bias(s, g0, &format!("{prefix}.gate1"))?;
    let gate = s.graph.sigmoid(g1)?;
    let gated = s.graph.mul(feat, gate)?;
    s.graph.add(gated, feat)
}

/// 3×3 ConvBNReLU, 1×1 classifier, bilinear resize to `out_h × out_w`.
pub fn seg_head(s: &mut Session, features: NodeId, prefix: &str, out_h: usize, out_w: usize) -> Result<NodeId> {
    let h = conv_bn_relu(s, features, &format!("{prefix}.conv"), 1)?;
    let logits = conv_bias(s, h, &format!("{prefix}.cls"))?;
    s.graph.resize(logits, out_h, out_w).stage(prefix)
}

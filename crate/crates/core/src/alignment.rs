//! Feature selection and feature alignment, the pair that replaces
//! attention-refinement aggregation in the semantic path.
//!
//! Selection re-weights a low-level map with a channel gate and keeps a
//! residual: `conv1x1(σ(W · gap(P_low)) ⊙ P_low + P_low)`.
//!
//! Alignment upsamples the high-level map to the selected map's size,
//! predicts per-tap offsets from their concatenation with a 1×1 conv, and
//! resamples the upsampled map with a deformable conv before adding the
//! selected map back:
//! `dcn(up(P_high), conv1x1([P_selected, up(P_high)])) + P_selected`.

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FsmParams {
    /// Channel-attention weight acting on the pooled vector, stored as a `[C,C,1,1]` kernel.
    pub w_selection: Tensor,
    /// `[Cout,C,1,1]`
    pub conv_weight: Tensor,
    /// `[1,Cout,1,1]`
    pub conv_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FsmNodes {
    pub w_selection: NodeId,
    pub conv_weight: NodeId,
    pub conv_bias: NodeId,
}

impl FsmParams {
    pub fn init(channels: usize, out_channels: usize, rng: &mut RngState) -> Self {
        Self {
            w_selection: Tensor::randn([channels, channels, 1, 1], libm::sqrt(1.0 / channels as f64), rng),
            conv_weight: Tensor::randn([out_channels, channels, 1, 1], libm::sqrt(2.0 / channels as f64), rng),
            conv_bias: Tensor::zeros([1, out_channels, 1, 1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_selection.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.conv_weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.w_selection.shape() != [c, c, 1, 1] {
            return Err(shape_err!("selection weight {:?} is not square [C,C,1,1]", self.w_selection.shape()));
        }
        let [co, ci, kh, kw] = self.conv_weight.shape();
        if ci != c || (kh, kw) != (1, 1) {
            return Err(shape_err!("selection conv {:?} does not map {c} channels 1x1", self.conv_weight.shape()));
        }
        if self.conv_bias.len() != co {
            return Err(shape_err!("selection conv bias {:?} for {co} outputs", self.conv_bias.shape()));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> FsmNodes {
        FsmNodes {
            w_selection: g.param(self.w_selection.clone()),
            conv_weight: g.param(self.conv_weight.clone()),
            conv_bias: g.param(self.conv_bias.clone()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_selection.len() + self.conv_weight.len() + self.conv_bias.len()
    }
}

/// Selection on the graph; `p_low` must carry the gate's channel count.
pub fn feature_select_graph(g: &mut Graph, p_low: NodeId, p: &FsmNodes) -> Result<NodeId> {
    let c = g.shape(p_low)[1];
    let wc = g.shape(p.w_selection)[1];
    if c != wc {
        return Err(shape_err!("feature selection expects {wc} channels, got {c}"));
    }
    let pooled = g.global_avg_pool(p_low)?;
    let logits = g.conv2d(pooled, p.w_selection, None, 1, 0)?;
    let gate = g.sigmoid(logits)?;
    let gated = g.mul(p_low, gate)?;
    let residual = g.add(gated, p_low)?;
    g.conv2d(residual, p.conv_weight, Some(p.conv_bias), 1, 0)
}

pub fn feature_select(p_low: &Tensor, params: &FsmParams) -> Result<Tensor> {
    params.validate()?;
    let mut g = Graph::new();
    let x = g.constant(p_low.clone());
    let nodes = params.register(&mut g);
    let out = feature_select_graph(&mut g, x, &nodes)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamParams {
    /// 1×1 conv from `[P_selected, up(P_high)]` to `2·k·k` offset channels.
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    /// `[C_selected, C_high, k, k]` deformable kernel over the upsampled high map.
    pub dcn_weight: Tensor,
    pub dcn_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FamNodes {
    pub offset_weight: NodeId,
    pub offset_bias: NodeId,
    pub dcn_weight: NodeId,
    pub dcn_bias: NodeId,
}

impl FamParams {
    /// Offsets start at zero so an untrained module is "upsample, convolve, add".
    pub fn init(selected_channels: usize, high_channels: usize, kernel: usize, rng: &mut RngState) -> Self {
        let taps = kernel * kernel;
        let fan_in = (high_channels * taps) as f64;
        Self {
            offset_weight: Tensor::zeros([2 * taps, selected_channels + high_channels, 1, 1]),
            offset_bias: Tensor::zeros([1, 2 * taps, 1, 1]),
            dcn_weight: Tensor::randn([selected_channels, high_channels, kernel, kernel], libm::sqrt(2.0 / fan_in), rng),
            dcn_bias: Tensor::zeros([1, selected_channels, 1, 1]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.dcn_weight.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [cs, ch, kh, kw] = self.dcn_weight.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("deformable kernel {kh}x{kw} must be square and odd"));
        }
        let [oc, oi, ok1, ok2] = self.offset_weight.shape();
        if oc != 2 * kh * kw || oi != cs + ch || (ok1, ok2) != (1, 1) {
            return Err(shape_err!(
                "offset conv {:?} must map {} channels to {} offsets",
                self.offset_weight.shape(),
                cs + ch,
                2 * kh * kw
            ));
        }
        if self.offset_bias.len() != oc || self.dcn_bias.len() != cs {
            return Err(shape_err!("alignment biases do not match their convolutions"));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> FamNodes {
        FamNodes {
            offset_weight: g.param(self.offset_weight.clone()),
            offset_bias: g.param(self.offset_bias.clone()),
            dcn_weight: g.param(self.dcn_weight.clone()),
            dcn_bias: g.param(self.dcn_bias.clone()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.offset_weight.len() + self.offset_bias.len() + self.dcn_weight.len() + self.dcn_bias.len()
    }
}

/// Alignment on the graph. Returns the aligned map, shaped like `p_selected`.
pub fn feature_align_graph(g: &mut Graph, p_selected: NodeId, p_high: NodeId, p: &FamNodes) -> Result<NodeId> {
    let [n, cs, h, w] = g.shape(p_selected);
    let [nh, _, hh, wh] = g.shape(p_high);
    if nh != n {
        return Err(shape_err!("alignment batch mismatch {nh} vs {n}"));
    }
    if hh > h || wh > w {
        return Err(shape_err!("high-level map {hh}x{wh} is finer than the selected map {h}x{w}"));
    }
    let [dco, _, k, _] = g.shape(p.dcn_weight);
    if dco != cs {
        return Err(shape_err!("deformable conv yields {dco} channels, selected map has {cs}"));
    }
    let up = g.resize(p_high, h, w)?;
    let both = g.channel_concat(p_selected, up)?;
    let offsets = g.conv2d(both, p.offset_weight, Some(p.offset_bias), 1, 0)?;
    let aligned = g.deform_conv2d(up, offsets, p.dcn_weight, Some(p.dcn_bias), 1, k / 2)?;
    g.add(aligned, p_selected)
}

pub fn feature_align(p_selected: &Tensor, p_high: &Tensor, params: &FamParams) -> Result<Tensor> {
    params.validate()?;
    let mut g = Graph::new();
    let s = g.constant(p_selected.clone());
    let hgh = g.constant(p_high.clone());
    let nodes = params.register(&mut g);
    let out = feature_align_graph(&mut g, s, hgh, &nodes)?;
    Ok(g.value(out).clone())
}

/// Parameters of the attention-refinement block the alignment pair replaces,
/// at the same widths: a 3×3 ConvBNReLU `c_in → c_out`, a 1×1 attention conv
/// with its batch norm, and the 3×3 ConvBNReLU refinement head applied after
/// upsampling.
pub fn arm_reference_param_count(c_in: usize, c_out: usize) -> usize {
    let conv_bn = |ci: usize, co: usize, k: usize| ci * co * k * k + 2 * co;
    conv_bn(c_in, c_out, 3) + conv_bn(c_out, c_out, 1) + conv_bn(c_out, c_out, 3)
}

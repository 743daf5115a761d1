//! Backbone and the aligned two-stream assembly.

use alloc::format;
use alloc::vec::Vec;

use super::blocks::{conv_bias, conv_bn_relu, ffm, seg_head, stdc_block};
use super::config::INPUT_DIVISOR;
use super::params::{NetworkParams, Session};
use crate::alignment::{feature_align_graph, feature_select_graph, FamNodes, FsmNodes};
use crate::autodiff::NodeId;
use crate::error::{arg_err, shape_err, Result, StageContext};
use crate::ops::BnMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct StageMaps {
    pub s8: NodeId,
    pub s16: NodeId,
    pub s32: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignNodes {
    /// `[N,K,H,W]` at input resolution.
    pub logits: NodeId,
    /// FFM output at 1/8 resolution; input to the attention head.
    pub penult: NodeId,
    pub stages: StageMaps,
}

pub fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_DIVISOR) || !w.is_multiple_of(INPUT_DIVISOR) {
        return Err(arg_err!("input {h}x{w} is not divisible by {INPUT_DIVISOR}"));
    }
    Ok(())
}

pub fn backbone_forward(s: &mut Session, image: NodeId) -> Result<StageMaps> {
    let [_, c, h, w] = s.graph.shape(image);
    check_input_extent(h, w)?;
    let cfg = s.config().clone();
    if c != cfg.input_channels {
        return Err(shape_err!("image has {c} channels, network expects {}", cfg.input_channels));
    }
    let mut x = image;
    for i in 0..cfg.stem.len() {
        x = conv_bn_relu(s, x, &format!("stem{i}"), 2)?;
    }
    let mut maps = Vec::with_capacity(3);
    for st in 0..3 {
        for b in 0..cfg.stage_blocks[st] {
            let stride = if b == 0 { 2 } else { 1 };
            x = stdc_block(s, x, &super::arch::block_name(st, b), cfg.stage_widths[st], stride)?;
        }
        maps.push(x);
    }
    Ok(StageMaps { s8: maps[0], s16: maps[1], s32: maps[2] })
}

fn fsm_nodes(s: &mut Session, prefix: &str) -> Result<FsmNodes> {
    Ok(FsmNodes {
        w_selection: s.param(&format!("{prefix}.select.weight"))?,
        conv_weight: s.param(&format!("{prefix}.conv.weight"))?,
        conv_bias: s.param(&format!("{prefix}.conv.bias"))?,
    })
}

fn fam_nodes(s: &mut Session, prefix: &str) -> Result<FamNodes> {
    Ok(FamNodes {
        offset_weight: s.param(&format!("{prefix}.offset.weight"))?,
        offset_bias: s.param(&format!("{prefix}.offset.bias"))?,
        dcn_weight: s.param(&format!("{prefix}.dcn.weight"))?,
        dcn_bias: s.param(&format!("{prefix}.dcn.bias"))?,
    })
}

/// Backbone, 1×1 global context on the 1/32 map, selection and alignment at
/// 1/16 and 1/8, feature fusion with the 1/8 backbone map, segmentation head.
pub fn stdc_align_forward(s: &mut Session, image: NodeId) -> Result<AlignNodes> {
    let [_, _, h, w] = s.graph.shape(image);
    let stages = backbone_forward(s, image).stage("backbone")?;
    let ctx = conv_bias(s, stages.s32, "context")?;

    let fsm16 = fsm_nodes(s, "fsm16")?;
    let sel16 = feature_select_graph(&mut s.graph, stages.s16, &fsm16).stage("fsm16")?;
    let fam16 = fam_nodes(s, "fam16")?;
    let a16 = feature_align_graph(&mut s.graph, sel16, ctx, &fam16).stage("fam16")?;

    let fsm8 = fsm_nodes(s, "fsm8")?;
    let sel8 = feature_select_graph(&mut s.graph, stages.s8, &fsm8).stage("fsm8")?;
    let fam8 = fam_nodes(s, "fam8")?;
    let a8 = feature_align_graph(&mut s.graph, sel8, a16, &fam8).stage("fam8")?;

    let penult = ffm(s, stages.s8, a8, "ffm").stage("ffm")?;
    let logits = seg_head(s, penult, "head", h, w).stage("head")?;
    Ok(AlignNodes { logits, penult, stages })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub penult: Tensor,
    /// Backbone maps at 1/8, 1/16 and 1/32.
    pub stage_maps: [Tensor; 3],
}

/// Eval-mode forward pass on plain tensors.
pub fn forward_eval(params: &NetworkParams, image: &Tensor) -> Result<ForwardOutput> {
    let mut s = Session::new(params, BnMode::Eval);
    let x = s.graph.constant(image.clone());
    let out = stdc_align_forward(&mut s, x)?;
    let v = |id| s.graph.value(id).clone();
    Ok(ForwardOutput {
        logits: v(out.logits),
        penult: v(out.penult),
        stage_maps: [v(out.stages.s8), v(out.stages.s16), v(out.stages.s32)],
    })
}

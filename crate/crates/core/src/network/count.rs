//! Parameter and FLOP accounting with a per-layer ledger.

use alloc::string::String;
use alloc::vec::Vec;

use super::arch::{self, is_attention_layer};
use super::config::NetworkConfig;
use crate::alignment::arm_reference_param_count;
use crate::attention::{check_scales, padded_extent, scaled_extent};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub name: String,
    pub params: usize,
    /// Multiply-adds summed over every scale that evaluates the layer.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accounting {
    pub params: usize,
    pub macs: u64,
    /// `2 · macs`.
    pub flops: u64,
    pub rows: Vec<LedgerRow>,
}

impl Accounting {
    /// Totals per top-level group (`stem0`, `stage1`, `fam8`, `attention`, ...).
    pub fn groups(&self) -> Vec<(String, usize, u64)> {
        let mut out: Vec<(String, usize, u64)> = Vec::new();
        for r in &self.rows {
            let g = r.name.split('.').next().unwrap_or(&r.name);
            match out.iter_mut().find(|(n, _, _)| n == g) {
                Some(e) => {
                    e.1 += r.params;
                    e.2 += r.macs;
                }
                None => out.push((g.into(), r.params, r.macs)),
            }
        }
        out
    }
}

/// Counts for one image of `h × w` evaluated at every scale in `scales`.
///
/// Each scale runs the full network on the rescaled image padded to a multiple
/// of 32; the shared attention head runs at every scale except the largest.
/// Only convolutions (standard and deformable, including the 1×1 gates) carry
/// multiply-adds; normalization, activations, pooling, resizing and bilinear
/// sampling are not counted.
pub fn count_params_flops(cfg: &NetworkConfig, h: usize, w: usize, scales: &[f64]) -> Result<Accounting> {
    cfg.validate()?;
    check_scales(scales)?;
    let mut rows: Vec<LedgerRow> = arch::layers(cfg, 64, 64)
        .into_iter()
        .map(|l| LedgerRow { params: l.params(), name: l.name, macs: 0 })
        .collect();
    for (i, &s) in scales.iter().enumerate() {
        let hp = padded_extent(scaled_extent(h, s));
        let wp = padded_extent(scaled_extent(w, s));
        let attention = i + 1 < scales.len();
        for (row, layer) in rows.iter_mut().zip(arch::layers(cfg, hp, wp)) {
            if attention || !is_attention_layer(&layer.name) {
                row.macs += layer.macs;
            }
        }
    }
    let params = rows.iter().map(|r| r.params).sum();
    let macs: u64 = rows.iter().map(|r| r.macs).sum();
    Ok(Accounting { params, macs, flops: 2 * macs, rows })
}

/// Parameters of the selection and alignment modules at both fusion levels.
pub fn alignment_path_params(cfg: &NetworkConfig) -> usize {
    arch::layers(cfg, 64, 64)
        .iter()
        .filter(|l| l.name.starts_with("fsm") || l.name.starts_with("fam"))
        .map(|l| l.params())
        .sum()
}

/// Attention-refinement blocks at the same two levels and widths.
pub fn arm_path_params(cfg: &NetworkConfig) -> usize {
    let [c8, c16, _] = cfg.stage_widths;
    let [a16, a8] = cfg.align_widths;
    arm_reference_param_count(c16, a16) + arm_reference_param_count(c8, a8)
}

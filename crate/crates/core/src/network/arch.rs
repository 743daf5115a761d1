//! Static description of every layer: parameter names, shapes and
//! multiply-add counts at a given input size. Initialization, validation and
//! accounting all read from here.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::NetworkConfig;
use crate::tensor::{numel, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Shape,
    pub role: TensorRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub tensors: Vec<TensorSpec>,
    /// Multiply-adds for one image.
    pub macs: u64,
}

impl Layer {
    pub fn params(&self) -> usize {
        self.tensors.iter().filter(|t| t.role.trainable()).map(|t| numel(t.shape)).sum()
    }
}

#[derive(Debug, Default)]
struct Walker {
    layers: Vec<Layer>,
}

fn out_extent(x: usize, k: usize, stride: usize, pad: usize) -> usize {
    (x + 2 * pad - k) / stride + 1
}

impl Walker {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize, bias: bool, hw: (usize, usize)) -> (usize, usize) {
        let (ho, wo) = (out_extent(hw.0, k, stride, k / 2), out_extent(hw.1, k, stride, k / 2));
        let mut tensors = vec![TensorSpec { name: format!("{name}.weight"), shape: [co, ci, k, k], role: TensorRole::Weight }];
        if bias {
            tensors.push(TensorSpec { name: format!("{name}.bias"), shape: [1, co, 1, 1], role: TensorRole::Bias });
        }
        let macs = (co * ho * wo * ci * k * k) as u64;
        self.layers.push(Layer { name: name.into(), tensors, macs });
        (ho, wo)
    }

    fn bn(&mut self, name: &str, c: usize) {
        let t = |suffix: &str, role| TensorSpec { name: format!("{name}.{suffix}"), shape: [1, c, 1, 1], role };
        let tensors = vec![
            t("gamma", TensorRole::Gamma),
            t("beta", TensorRole::Beta),
            t("running_mean", TensorRole::RunningMean),
            t("running_var", TensorRole::RunningVar),
        ];
        self.layers.push(Layer { name: name.into(), tensors, macs: 0 });
    }

    fn cbr(&mut self, prefix: &str, ci: usize, co: usize, k: usize, stride: usize, hw: (usize, usize)) -> (usize, usize) {
        let out = self.conv(&format!("{prefix}.conv"), ci, co, k, stride, false, hw);
        self.bn(&format!("{prefix}.bn"), co);
        out
    }
}

/// Unit widths of an STDC block with output width `cb`.
pub fn stdc_unit_widths(cb: usize) -> [usize; 4] {
    [cb / 2, cb / 4, cb / 8, cb / 8]
}

pub fn block_name(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

/// Layers of the single-scale network plus the attention head, for an input of `h × w`.
pub fn layers(cfg: &NetworkConfig, h: usize, w: usize) -> Vec<Layer> {
    let mut wk = Walker::default();
    let mut hw = (h, w);
    let mut c = cfg.input_channels;
    for (i, &width) in cfg.stem.iter().enumerate() {
        hw = wk.cbr(&format!("stem{i}"), c, width, 3, 2, hw);
        c = width;
    }
    let mut stage_hw = [(0, 0); 3];
    for s in 0..3 {
        let cb = cfg.stage_widths[s];
        let u = stdc_unit_widths(cb);
        for b in 0..cfg.stage_blocks[s] {
            let stride = if b == 0 { 2 } else { 1 };
            let name = block_name(s, b);
            let h0 = wk.cbr(&format!("{name}.unit0"), c, u[0], 1, 1, hw);
            let h1 = wk.cbr(&format!("{name}.unit1"), u[0], u[1], 3, stride, h0);
            let h2 = wk.cbr(&format!("{name}.unit2"), u[1], u[2], 3, 1, h1);
            hw = wk.cbr(&format!("{name}.unit3"), u[2], u[3], 3, 1, h2);
            c = cb;
        }
        stage_hw[s] = hw;
    }
    let [c8, c16, c32] = cfg.stage_widths;
    let [a16, a8] = cfg.align_widths;
    let taps = cfg.dcn_kernel * cfg.dcn_kernel;
    let k = cfg.dcn_kernel;

    wk.conv("context", c32, cfg.context_width, 1, 1, true, stage_hw[2]);

    wk.conv("fsm16.select", c16, c16, 1, 1, false, (1, 1));
    wk.conv("fsm16.conv", c16, a16, 1, 1, true, stage_hw[1]);
    wk.conv("fam16.offset", a16 + cfg.context_width, 2 * taps, 1, 1, true, stage_hw[1]);
    wk.conv("fam16.dcn", cfg.context_width, a16, k, 1, true, stage_hw[1]);

    wk.conv("fsm8.select", c8, c8, 1, 1, false, (1, 1));
    wk.conv("fsm8.conv", c8, a8, 1, 1, true, stage_hw[0]);
    wk.conv("fam8.offset", a8 + a16, 2 * taps, 1, 1, true, stage_hw[0]);
    wk.conv("fam8.dcn", a16, a8, k, 1, true, stage_hw[0]);

    let f = cfg.ffm_width;
    wk.cbr("ffm.fuse", c8 + a8, f, 1, 1, stage_hw[0]);
    wk.conv("ffm.gate0", f, f / 4, 1, 1, true, (1, 1));
    wk.conv("ffm.gate1", f / 4, f, 1, 1, true, (1, 1));

    wk.cbr("head.conv", f, cfg.head_width, 3, 1, stage_hw[0]);
    wk.conv("head.cls", cfg.head_width, cfg.classes, 1, 1, true, stage_hw[0]);

    wk.cbr("attention.0", f, cfg.attention_width, 3, 1, stage_hw[0]);
    wk.cbr("attention.1", cfg.attention_width, cfg.attention_width, 3, 1, stage_hw[0]);
    wk.conv("attention.out", cfg.attention_width, 1, 1, 1, true, stage_hw[0]);
    wk.layers
}

pub fn is_attention_layer(name: &str) -> bool {
    name.starts_with("attention.")
}

/// Every tensor of the model, in layer order.
pub fn tensor_specs(cfg: &NetworkConfig) -> Vec<TensorSpec> {
    layers(cfg, 64, 64).into_iter().flat_map(|l| l.tensors).collect()
}

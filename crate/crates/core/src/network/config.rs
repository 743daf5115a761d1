//! Widths, depths and class count of the segmentation network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub classes: usize,
    pub input_channels: usize,
    /// Widths of the two stride-2 stem convolutions.
    pub stem: [usize; 2],
    /// Output widths of the stages at 1/8, 1/16 and 1/32 resolution.
    pub stage_widths: [usize; 3],
    pub stage_blocks: [usize; 3],
    /// Width of the 1×1 global-context conv on the 1/32 map.
    pub context_width: usize,
    /// Widths of the aligned maps at 1/16 and 1/8.
    pub align_widths: [usize; 2],
    pub ffm_width: usize,
    pub head_width: usize,
    pub attention_width: usize,
    pub dcn_kernel: usize,
}

/// Every network input extent must be a multiple of this.
pub const INPUT_DIVISOR: usize = 32;

impl NetworkConfig {
    /// Desk-scale default: stages 64/128/256 with two blocks each.
    pub fn toy(classes: usize) -> Self {
        Self {
            classes,
            input_channels: 3,
            stem: [16, 32],
            stage_widths: [64, 128, 256],
            stage_blocks: [2, 2, 2],
            context_width: 64,
            align_widths: [64, 64],
            ffm_width: 64,
            head_width: 64,
            attention_width: 32,
            dcn_kernel: 3,
        }
    }

    /// Full-depth configuration used for parameter and FLOP accounting only.
    pub fn reference() -> Self {
        Self {
            classes: 19,
            input_channels: 3,
            stem: [32, 64],
            stage_widths: [256, 512, 1024],
            stage_blocks: [4, 5, 3],
            context_width: 512,
            align_widths: [512, 128],
            ffm_width: 384,
            head_width: 256,
            attention_width: 512,
            dcn_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.classes) {
            return Err(arg_err!("classes = {} must lie in 2..=255", self.classes));
        }
        if let Some(w) = self.stage_widths.iter().find(|&&w| w == 0 || w % 8 != 0) {
            return Err(arg_err!("stage width {w} is not a positive multiple of 8"));
        }
        if self.stage_blocks.contains(&0) {
            return Err(arg_err!("every stage needs at least one block"));
        }
        if self.dcn_kernel == 0 || self.dcn_kernel.is_multiple_of(2) {
            return Err(arg_err!("dcn_kernel = {} must be odd", self.dcn_kernel));
        }
        let widths = [
            self.input_channels,
            self.stem[0],
            self.stem[1],
            self.context_width,
            self.align_widths[0],
            self.align_widths[1],
            self.head_width,
            self.attention_width,
        ];
        if widths.contains(&0) {
            return Err(arg_err!("channel widths must be positive"));
        }
        if self.ffm_width < 4 {
            return Err(arg_err!("ffm_width = {} leaves no room for the gate bottleneck", self.ffm_width));
        }
        Ok(())
    }

    /// `key = value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        alloc::vec![
            ("classes", self.classes.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("stem", list(&self.stem)),
            ("stage_widths", list(&self.stage_widths)),
            ("stage_blocks", list(&self.stage_blocks)),
            ("context_width", self.context_width.to_string()),
            ("align_widths", list(&self.align_widths)),
            ("ffm_width", self.ffm_width.to_string()),
            ("head_width", self.head_width.to_string()),
            ("attention_width", self.attention_width.to_string()),
            ("dcn_kernel", self.dcn_kernel.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Reads the keys written by [`to_pairs`](Self::to_pairs); missing keys keep
    /// the values of `base`. Unknown keys are left to the caller.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, base: NetworkConfig) -> Result<Self> {
        let mut cfg = base;
        for (key, value) in pairs {
            match key.as_str() {
                "classes" => cfg.classes = scalar(key, value)?,
                "input_channels" => cfg.input_channels = scalar(key, value)?,
                "stem" => cfg.stem = array(key, value)?,
                "stage_widths" => cfg.stage_widths = array(key, value)?,
                "stage_blocks" => cfg.stage_blocks = array(key, value)?,
                "context_width" => cfg.context_width = scalar(key, value)?,
                "align_widths" => cfg.align_widths = array(key, value)?,
                "ffm_width" => cfg.ffm_width = scalar(key, value)?,
                "head_width" => cfg.head_width = scalar(key, value)?,
                "attention_width" => cfg.attention_width = scalar(key, value)?,
                "dcn_kernel" => cfg.dcn_kernel = scalar(key, value)?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub const KEYS: [&'static str; 11] = [
        "classes",
        "input_channels",
        "stem",
        "stage_widths",
        "stage_blocks",
        "context_width",
        "align_widths",
        "ffm_width",
        "head_width",
        "attention_width",
        "dcn_kernel",
    ];
}

fn scalar(key: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| arg_err!("`{key}`: expected a non-negative integer, got `{value}`"))
}

fn array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != N {
        return Err(arg_err!("`{key}`: expected {N} comma-separated integers, got `{value}`"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = scalar(key, p)?;
    }
    Ok(out)
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| arg_err!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim()))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(arg_err!("line {}: empty key", i + 1));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(arg_err!("line {}: duplicate key `{k}`", i + 1));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        for cfg in [NetworkConfig::toy(4), NetworkConfig::reference()] {
            let parsed = parse_key_values(&cfg.to_text()).unwrap();
            let back = NetworkConfig::from_pairs(&parsed, NetworkConfig::toy(2)).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn comments_and_defaults() {
        let kv = parse_key_values("# widths\nclasses = 7  # seven\n\nstage_blocks = 1,1,1\n").unwrap();
        let cfg = NetworkConfig::from_pairs(&kv, NetworkConfig::toy(4)).unwrap();
        assert_eq!(cfg.classes, 7);
        assert_eq!(cfg.stage_blocks, [1, 1, 1]);
        assert_eq!(cfg.stage_widths, [64, 128, 256]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse_key_values("classes 4").is_err());
        assert!(parse_key_values("a = 1\na = 2").is_err());
        let bad = |s: &str| NetworkConfig::from_pairs(&parse_key_values(s).unwrap(), NetworkConfig::toy(4));
        assert!(bad("classes = 1").is_err());
        assert!(bad("stage_widths = 64,128").is_err());
        assert!(bad("stage_widths = 60,128,256").is_err());
        assert!(bad("dcn_kernel = 2").is_err());
        assert!(bad("classes = four").is_err());
    }
}

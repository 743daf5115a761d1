//! Two-scale training with auxiliary per-scale losses, and evaluation.
//!
//! Each iteration draws a batch (optionally mirrored), runs the pyramid over
//! the training scales, and minimizes
//! `CE(fused) + aux_weight · Σ_s CE(resize(logits_s))` with Adam.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::adam::{adam_step, AdamState};
use crate::attention::{check_scales, multiscale_graph, multiscale_infer, AttentionMode};
use crate::dataset::{collate, gen_shapes_dataset, SegSample};
use crate::error::{arg_err, Error, Result};
use crate::loss::IGNORE_ID;
use crate::metrics::{accumulate_confusion, ConfusionMatrix};
use crate::network::{NetworkConfig, NetworkParams, Session};
use crate::ops::BnMode;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::autodiff::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub scales: Vec<f64>,
    /// Seeds parameter initialization and batch sampling.
    pub seed: u64,
    /// Iterations between snapshot events; 0 disables them.
    pub snapshot_interval: usize,
    pub log_interval: usize,
    pub lr: f64,
    pub aux_weight: f64,
    /// `false` trains with a fixed blend `α = 0.5` instead of the attention head.
    pub attention: bool,
    pub flip: bool,
    pub classes: usize,
    /// Side of the square synthetic images.
    pub size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    /// Seeds the synthetic dataset; the evaluation split uses the next seed.
    pub data_seed: u64,
    /// Directory in `images/`, `labels/` layout; synthetic data when absent.
    pub data_root: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch: 2,
            scales: alloc::vec![0.5, 1.0],
            seed: 7,
            snapshot_interval: 0,
            log_interval: 10,
            lr: 1e-4,
            aux_weight: 0.4,
            attention: true,
            flip: true,
            classes: 4,
            size: 64,
            train_count: 256,
            eval_count: 32,
            data_seed: 42,
            data_root: None,
        }
    }
}

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| arg_err!("`{key}`: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(arg_err!("`{key}`: expected true or false, got `{value}`")),
    }
}

/// Comma-separated positive numbers, e.g. `0.5,1.0`.
pub fn parse_scales(text: &str) -> Result<Vec<f64>> {
    let scales = text.split(',').map(|s| parse::<f64>("scales", s)).collect::<Result<Vec<_>>>()?;
    check_scales(&scales)?;
    Ok(scales)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "iterations",
        "batch",
        "scales",
        "seed",
        "snapshot_interval",
        "log_interval",
        "lr",
        "aux_weight",
        "attention",
        "flip",
        "classes",
        "size",
        "train_count",
        "eval_count",
        "data_seed",
        "data_root",
    ];

    /// Overrides fields from `key = value` pairs; unknown keys are ignored.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, base: TrainConfig) -> Result<Self> {
        let mut c = base;
        for (k, v) in pairs {
            match k.as_str() {
                "iterations" => c.iterations = parse(k, v)?,
                "batch" => c.batch = parse(k, v)?,
                "scales" => c.scales = parse_scales(v)?,
                "seed" => c.seed = parse(k, v)?,
                "snapshot_interval" => c.snapshot_interval = parse(k, v)?,
                "log_interval" => c.log_interval = parse(k, v)?,
                "lr" => c.lr = parse(k, v)?,
                "aux_weight" => c.aux_weight = parse(k, v)?,
                "attention" => c.attention = parse_bool(k, v)?,
                "flip" => c.flip = parse_bool(k, v)?,
                "classes" => c.classes = parse(k, v)?,
                "size" => c.size = parse(k, v)?,
                "train_count" => c.train_count = parse(k, v)?,
                "eval_count" => c.eval_count = parse(k, v)?,
                "data_seed" => c.data_seed = parse(k, v)?,
                "data_root" => c.data_root = Some(v.trim().to_string()),
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(arg_err!("iterations and batch must be at least 1"));
        }
        check_scales(&self.scales)?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(arg_err!("lr and aux_weight must be finite and non-negative"));
        }
        if self.data_root.is_none() && self.train_count == 0 {
            return Err(arg_err!("train_count must be at least 1"));
        }
        Ok(())
    }

    pub fn mode(&self) -> AttentionMode {
        if self.attention {
            AttentionMode::Learned
        } else {
            AttentionMode::Fixed(0.5)
        }
    }
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Loss { iteration: usize, loss: f64 },
    Snapshot { iteration: usize, params: &'a NetworkParams },
}

/// Loss and per-parameter gradients for one batch; `params` is not modified.
pub struct StepOutcome {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_batches: Vec<(String, crate::ops::BatchStats)>,
}

/// Records the training loss for a collated batch in `s` and returns its node.
pub fn loss_graph(s: &mut Session, image: &Tensor, labels: &[u8], cfg: &TrainConfig) -> Result<NodeId> {
    let [_, _, h, w] = image.shape();
    let nodes = multiscale_graph(s, image, &cfg.scales, cfg.mode())?;
    let g = &mut s.graph;
    let mut loss = g.cross_entropy(nodes.fused, labels, IGNORE_ID)?;
    if cfg.aux_weight > 0.0 {
        for r in &nodes.runs {
            let up = g.resize(r.logits, h, w)?;
            let ce = g.cross_entropy(up, labels, IGNORE_ID)?;
            let weighted = g.affine(ce, cfg.aux_weight, 0.0)?;
            loss = g.add(loss, weighted)?;
        }
    }
    Ok(loss)
}

pub fn compute_step(params: &NetworkParams, batch: &[SegSample], cfg: &TrainConfig) -> Result<StepOutcome> {
    let (image, labels) = collate(batch)?;
    let mut s = Session::new(params, BnMode::Train);
    let loss = loss_graph(&mut s, &image, &labels, cfg)?;
    let value = s.graph.value(loss).data()[0];
    let grads = s.graph.backward(loss)?;
    Ok(StepOutcome { loss: value, grads: s.named_gradients(&grads), bn_batches: s.bn_batches().to_vec() })
}

/// Trains `params` in place and returns the per-iteration loss curve.
pub fn train(
    params: &mut NetworkParams,
    data: &[SegSample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    for s in data {
        s.check_labels(params.config.classes)?;
    }
    let mut rng = RngState::new(cfg.seed ^ 0x7472_6169_6e00);
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<SegSample> = (0..cfg.batch)
            .map(|_| {
                let s = &data[rng.below(data.len())];
                if cfg.flip && rng.uniform() < 0.5 {
                    s.flipped()
                } else {
                    s.clone()
                }
            })
            .collect();
        let step = compute_step(params, &batch, cfg).map_err(|e| match e.root() {
            Error::NonFinite(_) => Error::Diverged { iteration: it },
            _ => e,
        })?;
        if !step.loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        adam_step(&mut params.tensors, &step.grads, &mut adam)
            .map_err(|e| Error::Stage { stage: format!("iteration {it}"), source: alloc::boxed::Box::new(e) })?;
        params.apply_bn_updates(&step.bn_batches)?;
        curve.push(step.loss);
        let done = it + 1;
        if cfg.log_interval > 0 && (it % cfg.log_interval == 0 || done == cfg.iterations) {
            observer(&TrainEvent::Loss { iteration: it, loss: step.loss })?;
        }
        if cfg.snapshot_interval > 0 && done % cfg.snapshot_interval == 0 {
            observer(&TrainEvent::Snapshot { iteration: done, params })?;
        }
    }
    Ok(curve)
}

/// Confusion matrix of multiscale predictions over `samples`.
pub fn evaluate(params: &NetworkParams, samples: &[SegSample], scales: &[f64], mode: AttentionMode) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.config.classes);
    for s in samples {
        let out = multiscale_infer(params, &s.image, scales, mode)?;
        accumulate_confusion(&out.fused, &s.labels, IGNORE_ID, &mut cm)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Evaluation with the configured blending.
    pub eval: ConfusionMatrix,
    /// The same weights evaluated with a fixed `α = 0.5` blend.
    pub eval_fixed_blend: ConfusionMatrix,
}

impl TrainReport {
    /// Mean of the first `n` losses.
    pub fn initial_loss(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[..k].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `n` losses.
    pub fn final_loss(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Synthetic train/eval splits for a configuration.
pub fn synthetic_splits(cfg: &TrainConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let train = gen_shapes_dataset(cfg.data_seed, cfg.train_count, cfg.size, cfg.classes)?;
    let eval = gen_shapes_dataset(cfg.data_seed.wrapping_add(1), cfg.eval_count, cfg.size, cfg.classes)?;
    Ok((train, eval))
}

/// Fresh toy network trained on synthetic shapes, then evaluated on a held-out split.
pub fn train_toy(cfg: &TrainConfig, observer: &mut dyn FnMut(&TrainEvent) -> Result<()>) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    let (train_set, eval_set) = synthetic_splits(cfg)?;
    let mut params = NetworkParams::init(NetworkConfig::toy(cfg.classes), &mut RngState::new(cfg.seed))?;
    let losses = train(&mut params, &train_set, cfg, observer)?;
    let eval = evaluate(&params, &eval_set, &cfg.scales, cfg.mode())?;
    let eval_fixed_blend = evaluate(&params, &eval_set, &cfg.scales, AttentionMode::Fixed(0.5))?;
    Ok((params, TrainReport { losses, eval, eval_fixed_blend }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::parse_key_values;

    fn tiny(iterations: usize) -> TrainConfig {
        TrainConfig { iterations, size: 32, train_count: 4, eval_count: 2, ..TrainConfig::default() }
    }

    fn tiny_params(seed: u64) -> NetworkParams {
        let mut c = NetworkConfig::toy(4);
        c.stage_blocks = [1, 1, 1];
        NetworkParams::init(c, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn config_pairs() {
        let kv = parse_key_values("iterations = 5\nscales = 0.25,0.5,1.0\nattention = false\n").unwrap();
        let c = TrainConfig::from_pairs(&kv, TrainConfig::default()).unwrap();
        assert_eq!(c.iterations, 5);
        assert_eq!(c.scales, [0.25, 0.5, 1.0]);
        assert_eq!(c.mode(), AttentionMode::Fixed(0.5));
        let bad = parse_key_values("scales = 1.0,0.5").unwrap();
        assert!(TrainConfig::from_pairs(&bad, TrainConfig::default()).is_err());
        let bad = parse_key_values("batch = 0").unwrap();
        assert!(TrainConfig::from_pairs(&bad, TrainConfig::default()).is_err());
    }

    #[test]
    fn seed_identical_runs_match() {
        let cfg = tiny(3);
        let (data, _) = synthetic_splits(&cfg).unwrap();
        let mut a = tiny_params(1);
        let mut b = tiny_params(1);
        let ca = train(&mut a, &data, &cfg, &mut |_| Ok(())).unwrap();
        let cb = train(&mut b, &data, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(ca.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), cb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn events_and_bn_updates() {
        let cfg = TrainConfig { snapshot_interval: 2, log_interval: 2, ..tiny(4) };
        let (data, _) = synthetic_splits(&cfg).unwrap();
        let mut p = tiny_params(2);
        let before = p.get("stem0.bn.running_mean").unwrap().clone();
        let mut losses = Vec::new();
        let mut snaps = Vec::new();
        train(&mut p, &data, &cfg, &mut |e| {
            match e {
                TrainEvent::Loss { iteration, .. } => losses.push(*iteration),
                TrainEvent::Snapshot { iteration, .. } => snaps.push(*iteration),
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(losses, [0, 2, 3]);
        assert_eq!(snaps, [2, 4]);
        assert!(!p.get("stem0.bn.running_mean").unwrap().bit_eq(&before));
    }

    #[test]
    fn attention_head_gets_gradient_from_every_pair() {
        let cfg = TrainConfig { scales: alloc::vec![0.5, 1.0, 2.0], ..tiny(1) };
        let (data, _) = synthetic_splits(&cfg).unwrap();
        let p = tiny_params(3);
        let step = compute_step(&p, &data[..1], &cfg).unwrap();
        let head: f64 = step.grads.iter().filter(|(k, _)| k.starts_with("attention.")).map(|(_, g)| g.l2_norm()).sum();
        assert!(head > 0.0);
        // the fixed blend never touches the head
        let fixed = TrainConfig { attention: false, ..cfg };
        let step = compute_step(&p, &data[..1], &fixed).unwrap();
        assert!(!step.grads.keys().any(|k| k.starts_with("attention.")));
    }

    #[test]
    fn diverged_learning_rate_reports_iteration() {
        let cfg = TrainConfig { lr: 1e300, ..tiny(5) };
        let (data, _) = synthetic_splits(&cfg).unwrap();
        let mut p = tiny_params(4);
        match train(&mut p, &data, &cfg, &mut |_| Ok(())) {
            Err(Error::Diverged { iteration }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

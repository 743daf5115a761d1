//! Finite-difference checks over every differentiable operation, the
//! alignment modules, and the whole network.
//!
//! Each check reduces an operation's output to a scalar through a fixed random
//! projection, `Σ y ⊙ r`, so that every output element influences the loss.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::dataset::{collate, gen_shapes_dataset};
use crate::error::{arg_err, Result};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::loss::IGNORE_ID;
use crate::network::{stdc_align_forward, NetworkConfig, NetworkParams, Session};
use crate::ops::{BnMode, Pointwise, RunningStats};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{loss_graph, TrainConfig};

/// Tolerance for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for deformable sampling and composite modules.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Location of the largest error.
    pub worst: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const SUITES: [&str; 4] = ["tensor", "deform", "alignment", "network"];

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckOutcome>> {
    match name {
        "tensor" => tensor_suite(seed),
        "deform" => deform_suite(seed),
        "alignment" => alignment_suite(seed),
        "network" => network_suite(seed),
        _ => Err(arg_err!("unknown gradient suite `{name}`; expected one of {SUITES:?}")),
    }
}

/// `Σ y ⊙ r` for a fixed random `r`.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let r = Tensor::randn(g.shape(y), 1.0, &mut RngState::new(seed ^ 0xabcd));
    let rc = g.constant(r);
    let p = g.mul(y, rc)?;
    g.sum(p)
}

fn check<F>(name: &str, tolerance: f64, params: &[Tensor], f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let report = grad_check(f, params, GradCheckOptions::default())?;
    let worst = report.worst.map(|(t, e, a, n)| alloc::format!("input {t}[{e}]: analytic {a:e}, numeric {n:e}"));
    Ok(CheckOutcome { name: name.into(), max_rel_error: report.max_rel_error, tolerance, checked: report.checked, worst })
}

/// Values bounded away from zero, so activations have no kink within ε.
fn away_from_zero(shape: [usize; 4], rng: &mut RngState) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn tensor_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = RngState::new(seed);
    let t = PRIMITIVE_TOLERANCE;
    let x = Tensor::randn([2, 3, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn([4, 3, 3, 3], 0.5, &mut rng);
    let b = Tensor::randn([1, 4, 1, 1], 0.5, &mut rng);
    let mut out = Vec::new();

    out.push(check("conv2d", t, &[x.clone(), w.clone(), b.clone()], |g, p| {
        let y = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?;
        project(g, y, 1)
    })?);
    out.push(check("conv2d stride 2", t, &[x.clone(), w.clone()], |g, p| {
        let y = g.conv2d(p[0], p[1], None, 2, 1)?;
        project(g, y, 2)
    })?);

    let gamma = Tensor::uniform([1, 4, 1, 1], 0.5, 1.5, &mut rng);
    let beta = Tensor::randn([1, 4, 1, 1], 0.2, &mut rng);
    let x4 = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
    out.push(check("batch_norm train", t, &[x4, gamma.clone(), beta.clone()], |g, p| {
        let (y, _) = g.batch_norm_train(p[0], p[1], p[2])?;
        project(g, y, 3)
    })?);
    let running = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
    let g3 = Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, &mut rng);
    let b3 = Tensor::randn([1, 3, 1, 1], 0.2, &mut rng);
    out.push(check("batch_norm eval", t, &[x.clone(), g3, b3], |g, p| {
        let y = g.batch_norm_eval(p[0], p[1], p[2], &running)?;
        project(g, y, 4)
    })?);
    out.push(check("conv2d+batch_norm+relu", t, &[x.clone(), w.clone(), gamma, beta], |g, p| {
        let y = g.conv2d(p[0], p[1], None, 1, 1)?;
        let (y, _) = g.batch_norm_train(y, p[2], p[3])?;
        let y = g.relu(y)?;
        project(g, y, 5)
    })?);

    let xa = away_from_zero([2, 3, 4, 4], &mut rng);
    out.push(check("relu", t, core::slice::from_ref(&xa), |g, p| {
        let y = g.pointwise(Pointwise::Relu, p[0], None)?;
        project(g, y, 6)
    })?);
    out.push(check("sigmoid", t, core::slice::from_ref(&x), |g, p| {
        let y = g.pointwise(Pointwise::Sigmoid, p[0], None)?;
        project(g, y, 7)
    })?);
    let cb = Tensor::randn([1, 3, 1, 1], 1.0, &mut rng);
    let same = Tensor::randn([2, 3, 5, 5], 1.0, &mut rng);
    out.push(check("add", t, &[x.clone(), same.clone()], |g, p| {
        let y = g.pointwise(Pointwise::Add, p[0], Some(p[1]))?;
        project(g, y, 8)
    })?);
    out.push(check("add broadcast", t, &[x.clone(), cb.clone()], |g, p| {
        let y = g.pointwise(Pointwise::Add, p[0], Some(p[1]))?;
        project(g, y, 9)
    })?);
    out.push(check("mul", t, &[x.clone(), same], |g, p| {
        let y = g.pointwise(Pointwise::Mul, p[0], Some(p[1]))?;
        project(g, y, 10)
    })?);
    out.push(check("mul broadcast", t, &[x.clone(), cb], |g, p| {
        let y = g.pointwise(Pointwise::Mul, p[0], Some(p[1]))?;
        project(g, y, 11)
    })?);
    let spatial = Tensor::randn([2, 1, 5, 5], 1.0, &mut rng);
    out.push(check("mul spatial broadcast", t, &[x.clone(), spatial], |g, p| {
        let y = g.mul(p[0], p[1])?;
        project(g, y, 12)
    })?);
    out.push(check("affine", t, core::slice::from_ref(&x), |g, p| {
        let y = g.affine(p[0], -0.7, 0.3)?;
        project(g, y, 13)
    })?);
    let other = Tensor::randn([2, 2, 5, 5], 1.0, &mut rng);
    out.push(check("channel_concat", t, &[x.clone(), other], |g, p| {
        let y = g.channel_concat(p[0], p[1])?;
        project(g, y, 14)
    })?);
    out.push(check("global_avg_pool", t, core::slice::from_ref(&x), |g, p| {
        let y = g.global_avg_pool(p[0])?;
        project(g, y, 15)
    })?);
    let even = Tensor::randn([2, 3, 6, 4], 1.0, &mut rng);
    out.push(check("avg_pool2x2", t, core::slice::from_ref(&even), |g, p| {
        let y = g.avg_pool2x2(p[0])?;
        project(g, y, 16)
    })?);
    out.push(check("bilinear_resize up", t, core::slice::from_ref(&x), |g, p| {
        let y = g.resize(p[0], 8, 11)?;
        project(g, y, 17)
    })?);
    out.push(check("bilinear_resize down", t, core::slice::from_ref(&even), |g, p| {
        let y = g.resize(p[0], 3, 3)?;
        project(g, y, 18)
    })?);
    out.push(check("pad_bottom_right", t, core::slice::from_ref(&x), |g, p| {
        let y = g.pad_bottom_right(p[0], 7, 8)?;
        project(g, y, 19)
    })?);
    out.push(check("crop", t, core::slice::from_ref(&x), |g, p| {
        let y = g.crop(p[0], 1, 2, 3, 2)?;
        project(g, y, 20)
    })?);
    out.push(check("sum", t, core::slice::from_ref(&x), |g, p| {
        let y = g.affine(p[0], 1.0, 0.5)?;
        let y = g.mul(y, p[0])?;
        g.sum(y)
    })?);
    out.push(check("mean", t, core::slice::from_ref(&x), |g, p| {
        let y = g.mul(p[0], p[0])?;
        g.mean(y)
    })?);
    let logits = Tensor::randn([2, 4, 3, 3], 1.5, &mut rng);
    let labels: Vec<u8> = (0..18).map(|i| if i == 4 { IGNORE_ID } else { rng.below(4) as u8 }).collect();
    out.push(check("cross_entropy", t, &[logits], |g, p| g.cross_entropy(p[0], &labels, IGNORE_ID))?);
    Ok(out)
}

/// Offsets whose sample points sit strictly inside pixel cells.
fn interior_offsets(shape: [usize; 4], rng: &mut RngState) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.below(3) as f64 - 1.0 + rng.range(0.2, 0.8))
}

fn deform_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = RngState::new(seed);
    let t = COMPOSITE_TOLERANCE;
    let x = Tensor::randn([1, 2, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut rng);
    let b = Tensor::randn([1, 3, 1, 1], 0.5, &mut rng);
    let off = interior_offsets([1, 18, 6, 6], &mut rng);
    let mut out = Vec::new();
    out.push(check("deform_conv2d", t, &[x.clone(), off.clone(), w.clone(), b], |g, p| {
        let y = g.deform_conv2d(p[0], p[1], p[2], Some(p[3]), 1, 1)?;
        project(g, y, 21)
    })?);
    let off2 = interior_offsets([1, 18, 3, 3], &mut rng);
    out.push(check("deform_conv2d stride 2", t, &[x, off2, w], |g, p| {
        let y = g.deform_conv2d(p[0], p[1], p[2], None, 2, 1)?;
        project(g, y, 22)
    })?);
    Ok(out)
}

fn alignment_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    use crate::alignment::{feature_align_graph, feature_select_graph, FamNodes, FsmNodes};
    let mut rng = RngState::new(seed);
    let t = COMPOSITE_TOLERANCE;
    let low = Tensor::randn([1, 4, 6, 6], 1.0, &mut rng);
    let sel = Tensor::randn([4, 4, 1, 1], 0.5, &mut rng);
    let cw = Tensor::randn([3, 4, 1, 1], 0.5, &mut rng);
    let cb = Tensor::randn([1, 3, 1, 1], 0.5, &mut rng);
    let mut out = Vec::new();
    out.push(check("feature_select", t, &[low, sel, cw, cb], |g, p| {
        let nodes = FsmNodes { w_selection: p[1], conv_weight: p[2], conv_bias: p[3] };
        let y = feature_select_graph(g, p[0], &nodes)?;
        project(g, y, 31)
    })?);

    let selected = Tensor::randn([1, 3, 6, 6], 1.0, &mut rng);
    let high = Tensor::randn([1, 2, 3, 3], 1.0, &mut rng);
    // small predictor weights and a centred bias keep sample points inside cells
    let ow = Tensor::randn([18, 5, 1, 1], 0.01, &mut rng);
    let ob = Tensor::from_fn([1, 18, 1, 1], |_, c, _, _| if c % 3 == 0 { -0.5 } else { 0.5 });
    let dw = Tensor::randn([3, 2, 3, 3], 0.5, &mut rng);
    let db = Tensor::randn([1, 3, 1, 1], 0.5, &mut rng);
    out.push(check("feature_align", t, &[selected, high, ow, ob, dw, db], |g, p| {
        let nodes = FamNodes { offset_weight: p[2], offset_bias: p[3], dcn_weight: p[4], dcn_bias: p[5] };
        let y = feature_align_graph(g, p[0], p[1], &nodes)?;
        project(g, y, 32)
    })?);
    Ok(out)
}

/// A reduced toy network: one block per stage keeps the check quick.
pub fn small_network(seed: u64, classes: usize) -> Result<NetworkParams> {
    let mut cfg = NetworkConfig::toy(classes);
    cfg.stage_blocks = [1, 1, 1];
    let mut p = NetworkParams::init(cfg, &mut RngState::new(seed))?;
    // non-zero offset predictors so gradients flow through the sampling path
    let mut rng = RngState::new(seed ^ 0x0ff5e7);
    for name in ["fam16.offset.weight", "fam8.offset.weight"] {
        let t = p.get_mut(name)?;
        let fresh = Tensor::randn(t.shape(), 0.01, &mut rng);
        *t = fresh;
    }
    for name in ["fam16.offset.bias", "fam8.offset.bias"] {
        p.get_mut(name)?.data_mut().fill(0.5);
    }
    Ok(p)
}

fn network_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let params = small_network(seed, 3)?;
    let mut rng = RngState::new(seed ^ 0x1111);
    let image = Tensor::uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mut out = Vec::new();
    let eps = GradCheckOptions::default().eps;
    out.push(full_network_check("stdc_align_forward mean logit", &params, BnMode::Eval, eps, |s| {
        let x = s.graph.constant(image.clone());
        let o = stdc_align_forward(s, x)?;
        s.graph.mean(o.logits)
    })?);
    let data = gen_shapes_dataset(seed, 2, 32, 3)?;
    let (batch, labels) = collate(&data)?;
    let cfg = TrainConfig { scales: vec![0.5, 1.0], ..TrainConfig::default() };
    // two-sample batch statistics at the coarsest stage are strongly curved
    out.push(full_network_check("training loss, scales 0.5+1.0", &params, BnMode::Train, 1e-5, |s| {
        loss_graph(s, &batch, &labels, &cfg)
    })?);
    Ok(out)
}

/// Compares session gradients against central differences of the session
/// loss on a few elements of every trainable tensor. Elements whose
/// perturbation moves the computation onto another linear piece are redrawn.
fn full_network_check<F>(name: &str, params: &NetworkParams, mode: BnMode, eps: f64, loss: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Session) -> Result<NodeId>,
{
    const PER_TENSOR: usize = 4;
    const ATTEMPTS: usize = 16;
    let opts = GradCheckOptions { eps, ..GradCheckOptions::default() };
    let eval = |p: &NetworkParams| -> Result<(f64, Vec<i64>)> {
        let mut s = Session::new(p, mode);
        let out = loss(&mut s)?;
        Ok((s.graph.value(out).data()[0], s.graph.kink_pattern()))
    };
    let mut s = Session::new(params, mode);
    let out = loss(&mut s)?;
    let base = s.graph.value(out).data()[0];
    let pattern = s.graph.kink_pattern();
    if eval(params)?.0.to_bits() != base.to_bits() {
        return Err(crate::error::Error::NonDeterministic(alloc::format!("{name}: repeated evaluation differs")));
    }
    let grads = s.named_gradients(&s.graph.backward(out)?);

    let mut rng = RngState::new(opts.seed);
    let mut work = params.clone();
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    for (tname, analytic) in &grads {
        let len = analytic.len();
        let mut done = 0;
        for _ in 0..ATTEMPTS {
            if done == PER_TENSOR.min(len) {
                break;
            }
            let ei = rng.below(len);
            let orig = params.tensors[tname].data()[ei];
            let (hi, lo) = (orig + opts.eps, orig - opts.eps);
            work.get_mut(tname)?.data_mut()[ei] = hi;
            let (plus, kp) = eval(&work)?;
            work.get_mut(tname)?.data_mut()[ei] = lo;
            let (minus, km) = eval(&work)?;
            work.get_mut(tname)?.data_mut()[ei] = orig;
            if kp != pattern || km != pattern {
                continue;
            }
            let numeric = (plus - minus) / (hi - lo);
            let err = crate::gradcheck::relative_error(analytic.data()[ei], numeric, opts.floor);
            if worst_at.is_none() || err > worst {
                worst = err;
                worst_at = Some(alloc::format!("{tname}[{ei}]: analytic {:e}, numeric {numeric:e}", analytic.data()[ei]));
            }
            done += 1;
            checked += 1;
        }
        if done == 0 {
            return Err(arg_err!("{name}: every probe of `{tname}` crossed a kink"));
        }
    }
    Ok(CheckOutcome { name: name.into(), max_rel_error: worst, tolerance: COMPOSITE_TOLERANCE, checked, worst: worst_at })
}

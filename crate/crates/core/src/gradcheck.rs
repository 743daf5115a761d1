//! Central-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::autodiff::{scalar, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Elements sampled per tensor; smaller tensors are checked exhaustively.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so that gradients which
    /// are zero up to rounding do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, samples: 64, seed: 0x5eed, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of elements compared.
    pub checked: usize,
    /// `(tensor index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
    libm::fabs(analytic - numeric) / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    scalar(&g, out)
}

/// Element indices to probe for a tensor of `len` elements.
fn sample_indices(len: usize, samples: usize, rng: &mut RngState) -> Vec<usize> {
    if len <= samples {
        return (0..len).collect();
    }
    let mut picked: Vec<usize> = Vec::with_capacity(samples);
    while picked.len() < samples {
        let i = rng.below(len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compares gradients from [`Graph::backward`] against central differences
/// `(f(θ + ε e) - f(θ - ε e)) / 2ε` on sampled elements of every tensor.
///
/// `f` receives a fresh graph with `params` registered as parameter leaves (in
/// order) and returns the scalar node to differentiate.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    for (i, p) in params.iter().enumerate() {
        p.ensure_finite(&alloc::format!("grad_check parameter {i}"))?;
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let base = scalar(&g, out)?;
    let again = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(alloc::format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }
    let grads = g.backward(out)?;

    let mut rng = RngState::new(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for ei in sample_indices(params[ti].len(), opts.samples, &mut rng) {
            let orig = params[ti].data()[ei];
            let (hi, lo) = (orig + opts.eps, orig - opts.eps);
            work[ti].data_mut()[ei] = hi;
            let plus = evaluate(&f, &work)?;
            work[ti].data_mut()[ei] = lo;
            let minus = evaluate(&f, &work)?;
            work[ti].data_mut()[ei] = orig;
            // the representable step, not 2ε
            let numeric = (plus - minus) / (hi - lo);
            let a = analytic.data()[ei];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = RngState::new(1);
        let x = Tensor::uniform([1, 3, 4, 4], 0.5, 1.0, &mut rng);
        let w = Tensor::uniform([1, 3, 4, 4], -0.1, 0.1, &mut rng);
        let report = grad_check(
            |g, p| {
                let xc = g.constant(x.clone());
                let y = g.mul(p[0], xc)?;
                g.sum(y)
            },
            &[w],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 48);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn samples_are_bounded_per_tensor() {
        let mut rng = RngState::new(2);
        let w = Tensor::randn([1, 1, 20, 20], 1.0, &mut rng);
        let report = grad_check(|g, p| g.sum(p[0]), &[w], GradCheckOptions::default()).unwrap();
        assert_eq!(report.checked, 64);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use core::cell::Cell;
        let calls = Cell::new(0.0);
        let w = Tensor::zeros([1, 1, 1, 1]);
        let r = grad_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                let y = g.affine(p[0], 1.0, calls.get())?;
                g.sum(y)
            },
            &[w],
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }
}

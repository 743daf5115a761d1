//! Bias-corrected Adam without weight decay.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    /// First and second moments, keyed like the parameters.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }
}

/// One update of every parameter that has an entry in `grads`.
///
/// `θ ← θ − lr · m̂ / (√v̂ + ε)` with `m̂ = m / (1 − β₁ᵗ)`, `v̂ = v / (1 − β₂ᵗ)`.
/// All gradients are validated before any parameter moves, so an error leaves
/// `params` and `state` untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| shape_err!("gradient for unknown parameter `{name}`"))?;
        if p.shape() != g.shape() {
            return Err(shape_err!("gradient {:?} for parameter `{name}` {:?}", g.shape(), p.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(alloc::format!("gradient of `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let (b1, b2) = (state.beta1, state.beta2);
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= state.lr * mhat / (libm::sqrt(vhat) + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn single(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("theta".to_string(), Tensor::full([1, 1, 1, 1], v));
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(3.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &single(0.0), &mut st).unwrap();
        assert_eq!(p["theta"].data()[0], 3.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &single(0.5), &mut st).unwrap();
        // m̂ = 0.5 and √v̂ = 0.5 at t = 1
        let want = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p["theta"].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn three_steps_on_a_parabola() {
        // straight-line reference with scalar state
        let (lr, b1, b2, eps) = (1e-4, 0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=3 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = single(1.0);
        let mut st = AdamState::default();
        for _ in 0..3 {
            let g = single(2.0 * p["theta"].data()[0]);
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!((p["theta"].data()[0] - th).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = single(0.7);
        let mut st = AdamState::new(0.0);
        for _ in 0..5 {
            adam_step(&mut p, &single(1.3), &mut st).unwrap();
        }
        assert_eq!(p["theta"].data()[0], 0.7);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut st = AdamState::default();
        let err = adam_step(&mut p, &single(f64::NAN), &mut st).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut g = BTreeMap::new();
        g.insert("theta".to_string(), Tensor::zeros([1, 2, 1, 1]));
        assert!(adam_step(&mut p, &g, &mut AdamState::default()).is_err());
    }
}

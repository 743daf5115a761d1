//! Per-channel batch normalization.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running estimates consumed in eval mode and refreshed in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats) {
        let unbias = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
        }
    }
}

/// Biased per-channel moments of one batch, plus the element count per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = input.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "batch norm over {c} channels got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let count = input.batch() * input.height() * input.width();
    if count == 0 {
        return Err(arg_err!("batch norm over a zero-element channel"));
    }
    Ok(count)
}

pub fn batch_stats(input: &Tensor) -> BatchStats {
    let [n, c, h, w] = input.shape();
    let count = n * h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += input.plane(ni, ci).iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for ni in 0..n {
            v += input.plane(ni, ci).iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / count as f64;
    }
    BatchStats { mean, var, count }
}

/// Normalizes with the supplied per-channel moments: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn normalize(input: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64]) -> Result<Tensor> {
    check(input, gamma, beta)?;
    let [n, c, _, _] = input.shape();
    let mut out = input.clone();
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / libm::sqrt(var[ci] + BN_EPSILON);
            let (g, b, m) = (gamma.data()[ci], beta.data()[ci], mean[ci]);
            for v in out.plane_mut(ni, ci) {
                *v = g * ((*v - m) * inv) + b;
            }
        }
    }
    Ok(out)
}

/// Batch normalization. Train mode uses batch moments and refreshes `running`;
/// eval mode uses `running` unchanged.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: BnMode,
    running: &mut RunningStats,
) -> Result<Tensor> {
    check(input, gamma, beta)?;
    if running.mean.len() != input.channels() || running.var.len() != input.channels() {
        return Err(shape_err!(
            "running statistics hold {} channels, input has {}",
            running.mean.len(),
            input.channels()
        ));
    }
    match mode {
        BnMode::Train => {
            let stats = batch_stats(input);
            let out = normalize(input, gamma, beta, &stats.mean, &stats.var)?;
            running.update(&stats);
            Ok(out)
        }
        BnMode::Eval => normalize(input, gamma, beta, &running.mean, &running.var),
    }
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward pass. With `batch_moments` the mean and variance are functions of
/// the input (train mode); otherwise they are constants (eval mode).
pub fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    var: &[f64],
    batch_moments: bool,
    grad_out: &Tensor,
) -> BnGrads {
    let [n, c, h, w] = input.shape();
    let count = (n * h * w) as f64;
    let mut dx = Tensor::zeros(input.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for ci in 0..c {
        let inv = 1.0 / libm::sqrt(var[ci] + BN_EPSILON);
        let g = gamma.data()[ci];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            for (x, dy) in input.plane(ni, ci).iter().zip(grad_out.plane(ni, ci)) {
                let xhat = (x - mean[ci]) * inv;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        for ni in 0..n {
            let start = input.offset(ni, ci, 0, 0);
            let xs = &input.data()[start..start + h * w];
            let gs = &grad_out.data()[start..start + h * w];
            let ds = &mut dx.data_mut()[start..start + h * w];
            for ((d, x), dy) in ds.iter_mut().zip(xs).zip(gs) {
                *d = if batch_moments {
                    let xhat = (x - mean[ci]) * inv;
                    g * inv * (dy - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    g * inv * dy
                };
            }
        }
    }
    BnGrads { input: dx, gamma: dgamma, beta: dbeta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full([2, 1, 3, 3], 4.0);
        let mut rs = RunningStats::new(1);
        let y = batch_norm(&x, &Tensor::full([1, 1, 1, 1], 1.0), &Tensor::zeros([1, 1, 1, 1]), BnMode::Train, &mut rs)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = RngState::new(2);
        let x = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
        let mut rs = RunningStats::new(2);
        let y = batch_norm(&x, &Tensor::zeros([1, 2, 1, 1]), &Tensor::full([1, 2, 1, 1], 5.0), BnMode::Train, &mut rs)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn train_output_has_unit_moments() {
        let mut rng = RngState::new(3);
        let x = Tensor::randn([2, 3, 4, 4], 2.0, &mut rng).map(|v| v + 3.0);
        let mut rs = RunningStats::new(3);
        let y = batch_norm(&x, &Tensor::full([1, 3, 1, 1], 1.0), &Tensor::zeros([1, 3, 1, 1]), BnMode::Train, &mut rs)
            .unwrap();
        // direct moment computation
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            let xs: Vec<f64> = (0..2).flat_map(|n| x.plane(n, c).to_vec()).collect();
            let xm = xs.iter().sum::<f64>() / xs.len() as f64;
            let xv = xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>() / xs.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - xv / (xv + BN_EPSILON)).abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::from_fn([1, 1, 1, 4], |_, _, _, x| x as f64);
        let mut rs = RunningStats::new(1);
        batch_norm(&x, &Tensor::full([1, 1, 1, 1], 1.0), &Tensor::zeros([1, 1, 1, 1]), BnMode::Train, &mut rs).unwrap();
        assert!((rs.mean[0] - 0.15).abs() < 1e-15);
        // unbiased variance of 0..4 is 5/3
        assert!((rs.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::full([1, 1, 2, 2], 3.0);
        let mut rs = RunningStats { mean: vec![1.0], var: vec![4.0 - BN_EPSILON] };
        let y = batch_norm(&x, &Tensor::full([1, 1, 1, 1], 1.0), &Tensor::zeros([1, 1, 1, 1]), BnMode::Eval, &mut rs)
            .unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn errors() {
        let mut rs = RunningStats::new(2);
        let g = Tensor::zeros([1, 2, 1, 1]);
        assert!(batch_norm(&Tensor::zeros([1, 3, 2, 2]), &g, &g, BnMode::Train, &mut rs).is_err());
        assert!(batch_norm(&Tensor::zeros([0, 2, 2, 2]), &g, &g, BnMode::Train, &mut rs).is_err());
    }
}

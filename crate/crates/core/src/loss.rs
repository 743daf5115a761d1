//! Pixel-wise softmax cross-entropy.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Label value excluded from loss and metrics.
pub const IGNORE_ID: u8 = 255;

fn check(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<()> {
    let [n, k, h, w] = logits.shape();
    if labels.len() != n * h * w {
        return Err(shape_err!(
            "{} labels for logits {:?} ({} pixels)",
            labels.len(),
            logits.shape(),
            n * h * w
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
        return Err(arg_err!("label {bad} out of range for {k} classes"));
    }
    Ok(())
}

/// Log-sum-exp over the class axis at one pixel, with max subtraction.
#[inline]
fn log_sum_exp(logits: &Tensor, n: usize, y: usize, x: usize) -> f64 {
    let k = logits.channels();
    let mut m = f64::NEG_INFINITY;
    for c in 0..k {
        m = m.max(logits.at(n, c, y, x));
    }
    let mut s = 0.0;
    for c in 0..k {
        s += libm::exp(logits.at(n, c, y, x) - m);
    }
    m + libm::log(s)
}

/// Returns the mean loss and the number of contributing pixels.
pub fn cross_entropy_forward(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<(f64, usize)> {
    check(logits, labels, ignore)?;
    let [n, _, h, w] = logits.shape();
    let mut total = 0.0;
    let mut count = 0;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let l = labels[(ni * h + y) * w + x];
                if l == ignore {
                    continue;
                }
                total += log_sum_exp(logits, ni, y, x) - logits.at(ni, l as usize, y, x);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(arg_err!("every pixel carries the ignore label"));
    }
    Ok((total / count as f64, count))
}

/// `(softmax - onehot) * upstream / count`, zero on ignored pixels.
pub fn cross_entropy_backward(logits: &Tensor, labels: &[u8], ignore: u8, count: usize, upstream: f64) -> Tensor {
    let [n, k, h, w] = logits.shape();
    let mut g = Tensor::zeros(logits.shape());
    let scale = upstream / count as f64;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let l = labels[(ni * h + y) * w + x];
                if l == ignore {
                    continue;
                }
                let lse = log_sum_exp(logits, ni, y, x);
                for c in 0..k {
                    let p = libm::exp(logits.at(ni, c, y, x) - lse);
                    let onehot = if c == l as usize { 1.0 } else { 0.0 };
                    g.set(ni, c, y, x, (p - onehot) * scale);
                }
            }
        }
    }
    g
}

/// Mean cross-entropy of `logits` `[N,K,H,W]` against `labels` (`N*H*W`, row-major).
pub fn cross_entropy_loss(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<f64> {
    cross_entropy_forward(logits, labels, ignore).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use alloc::vec::Vec;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::full([1, 5, 2, 2], 0.3);
        let v = cross_entropy_loss(&logits, &[0, 1, 2, 4], IGNORE_ID).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_has_vanishing_loss() {
        let logits = Tensor::from_fn([1, 3, 1, 1], |_, c, _, _| if c == 1 { 50.0 } else { 0.0 });
        let v = cross_entropy_loss(&logits, &[1], IGNORE_ID).unwrap();
        assert!(v < 1e-20, "{v}");
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = RngState::new(31);
        let logits = Tensor::randn([1, 3, 4, 4], 2.0, &mut rng);
        let labels: Vec<u8> = (0..16).map(|i| if i == 5 { IGNORE_ID } else { (i % 3) as u8 }).collect();
        let mut total = 0.0;
        for i in 0..16 {
            if labels[i] == IGNORE_ID {
                continue;
            }
            let (y, x) = (i / 4, i % 4);
            let z: f64 = (0..3).map(|c| logits.at(0, c, y, x).exp()).sum();
            total += -(logits.at(0, labels[i] as usize, y, x).exp() / z).ln();
        }
        let v = cross_entropy_loss(&logits, &labels, IGNORE_ID).unwrap();
        assert!((v - total / 15.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        assert!(cross_entropy_loss(&Tensor::zeros([1, 2, 1, 2]), &[IGNORE_ID, IGNORE_ID], IGNORE_ID).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(cross_entropy_loss(&Tensor::zeros([1, 2, 1, 1]), &[2], IGNORE_ID).is_err());
        assert!(cross_entropy_loss(&Tensor::zeros([1, 2, 1, 1]), &[0; 2], IGNORE_ID).is_err());
    }
}

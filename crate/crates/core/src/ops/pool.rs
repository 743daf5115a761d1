use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Spatial mean per channel, `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(arg_err!("global average pool over an empty {h}x{w} plane"));
    }
    let area = (h * w) as f64;
    Ok(Tensor::from_fn([n, c, 1, 1], |ni, ci, _, _| {
        input.plane(ni, ci).iter().sum::<f64>() / area
    }))
}

pub fn global_avg_pool_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = grad.shape();
    let area = (h * w) as f64;
    Tensor::from_fn([n, c, h, w], |ni, ci, _, _| grad.at(ni, ci, 0, 0) / area)
}

/// Non-overlapping 2×2 average pooling (stride 2); odd trailing rows/columns are dropped.
pub fn avg_pool2x2(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h < 2 || w < 2 {
        return Err(arg_err!("2x2 average pool needs at least 2x2 input, got {h}x{w}"));
    }
    Ok(Tensor::from_fn([n, c, h / 2, w / 2], |ni, ci, y, x| {
        0.25 * (input.at(ni, ci, 2 * y, 2 * x)
            + input.at(ni, ci, 2 * y, 2 * x + 1)
            + input.at(ni, ci, 2 * y + 1, 2 * x)
            + input.at(ni, ci, 2 * y + 1, 2 * x + 1))
    }))
}

pub fn avg_pool2x2_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, ho, wo] = grad.shape();
    Tensor::from_fn([n, c, h, w], |ni, ci, y, x| {
        if y / 2 < ho && x / 2 < wo {
            0.25 * grad.at(ni, ci, y / 2, x / 2)
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use alloc::vec;

    #[test]
    fn constant_pools_to_constant() {
        let y = global_avg_pool(&Tensor::full([1, 2, 3, 3], 7.0)).unwrap();
        assert_eq!(y.shape(), [1, 2, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn small_mean() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5]);
    }

    #[test]
    fn matches_summation_oracle() {
        let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut RngState::new(12));
        let y = global_avg_pool(&x).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                let mut s = 0.0;
                for yy in 0..5 {
                    for xx in 0..5 {
                        s += x.at(n, c, yy, xx);
                    }
                }
                assert!((y.at(n, c, 0, 0) - s / 25.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        let y = avg_pool2x2(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}

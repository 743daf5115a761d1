//! Confusion matrices and mean intersection-over-union.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// `K×K` counts, rows are ground truth and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(shape_err!("merging {}-class matrix into {}-class", other.classes, self.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Counts `(truth, pred)` pairs, skipping pixels whose truth is `ignore`.
    pub fn add_labels(&mut self, pred: &[u8], truth: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(shape_err!("{} predictions for {} labels", pred.len(), truth.len()));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(arg_err!("class id {} outside {} classes", p.max(t), self.classes));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`; `None` when the class occurs in neither truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.classes;
        let tp = self.get(class, class);
        let row: u64 = (0..k).map(|j| self.get(class, j)).sum();
        let col: u64 = (0..k).map(|i| self.get(i, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean over the classes present in truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(arg_err!("mIoU of an empty confusion matrix"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Mean IoU restricted to `classes`, skipping absent ones; `None` if all are absent.
    pub fn subset_miou(&self, classes: &[usize]) -> Option<f64> {
        let present: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c)).collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Per-pixel argmax over the class axis, `N*H*W` ids; ties resolve to the lowest id.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let [n, k, h, w] = logits.shape();
    let mut out = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for c in 1..k {
                    if logits.at(ni, c, y, x) > logits.at(ni, best, y, x) {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}

pub fn accumulate_confusion(logits: &Tensor, labels: &[u8], ignore: u8, cm: &mut ConfusionMatrix) -> Result<()> {
    let [n, k, h, w] = logits.shape();
    if k != cm.classes() {
        return Err(shape_err!("{k}-channel logits for a {}-class matrix", cm.classes()));
    }
    if labels.len() != n * h * w {
        return Err(shape_err!("{} labels for {} pixels", labels.len(), n * h * w));
    }
    cm.add_labels(&argmax_labels(logits), labels, ignore)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::IGNORE_ID;
    use crate::rng::RngState;

    fn onehot(labels: &[u8], k: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, k, h, w], |_, c, y, x| if labels[y * w + x] as usize == c { 1.0 } else { 0.0 })
    }

    #[test]
    fn perfect_prediction() {
        let labels = [0u8, 1, 2, 1, 0, 2, 2, 2, 0];
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&onehot(&labels, 3, 3, 3), &labels, IGNORE_ID, &mut cm).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn half_and_half_against_all_zero() {
        let labels = [0u8, 0, 1, 1];
        let mut cm = ConfusionMatrix::new(2);
        accumulate_confusion(&Tensor::zeros([1, 2, 2, 2]), &labels, IGNORE_ID, &mut cm).unwrap();
        assert_eq!(cm.iou(0), Some(0.5));
        assert_eq!(cm.iou(1), Some(0.0));
        assert_eq!(miou(&cm).unwrap(), 0.25);
    }

    #[test]
    fn ties_pick_lowest_id_and_ignore_is_skipped() {
        let logits = Tensor::from_fn([1, 3, 1, 2], |_, c, _, _| if c == 0 { 0.0 } else { 1.0 });
        assert_eq!(argmax_labels(&logits), [1, 1]);
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&logits, &[1, IGNORE_ID], IGNORE_ID, &mut cm).unwrap();
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(5);
        cm.add_labels(&[0, 1], &[0, 1], IGNORE_ID).unwrap();
        assert_eq!(cm.iou(4), None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn matches_set_oracle() {
        let mut rng = RngState::new(11);
        let logits = Tensor::randn([1, 4, 8, 8], 1.0, &mut rng);
        let labels: Vec<u8> = (0..64).map(|_| rng.below(4) as u8).collect();
        let pred = argmax_labels(&logits);
        let mut cm = ConfusionMatrix::new(4);
        accumulate_confusion(&logits, &labels, IGNORE_ID, &mut cm).unwrap();
        let mut ious = Vec::new();
        for c in 0..4u8 {
            let inter = (0..64).filter(|&i| pred[i] == c && labels[i] == c).count();
            let union = (0..64).filter(|&i| pred[i] == c || labels[i] == c).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((cm.miou().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = ConfusionMatrix::new(2);
        a.add_labels(&[0, 1], &[0, 0], IGNORE_ID).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.add_labels(&[1], &[1], IGNORE_ID).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.total(), 3);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn class_count_mismatch() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(accumulate_confusion(&Tensor::zeros([1, 2, 1, 1]), &[0], IGNORE_ID, &mut cm).is_err());
        assert!(ConfusionMatrix::new(2).miou().is_err());
    }
}

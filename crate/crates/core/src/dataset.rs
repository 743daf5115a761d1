//! Synthetic shapes for segmentation: textured background plus filled
//! rectangles, circles and triangles whose size depends on their class.
//!
//! Class 1 is the largest object class and class `K-1` the smallest; typical
//! radii fall off geometrically between them, so object areas span two
//! orders of magnitude. Every sample contains at least one object of the
//! largest and one of the smallest class.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::loss::IGNORE_ID;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[1,3,H,W]` in `[0,1]`.
    pub image: Tensor,
    /// Row-major `H*W` class ids, or [`IGNORE_ID`].
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor, labels: Vec<u8>) -> Result<Self> {
        let [n, c, h, w] = image.shape();
        if n != 1 || c != 3 {
            return Err(shape_err!("sample image must be [1,3,H,W], got {:?}", image.shape()));
        }
        if labels.len() != h * w {
            return Err(shape_err!("{} labels for a {h}x{w} image", labels.len()));
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Checks every label is below `classes` or the ignore id.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE_ID && l as usize >= classes) {
            Some(l) => Err(arg_err!("label {l} outside {classes} classes")),
            None => Ok(()),
        }
    }

    /// Mirror image left to right.
    pub fn flipped(&self) -> SegSample {
        let (h, w) = (self.height(), self.width());
        let image = Tensor::from_fn(self.image.shape(), |n, c, y, x| self.image.at(n, c, y, w - 1 - x));
        let mut labels = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                labels[y * w + x] = self.labels[y * w + w - 1 - x];
            }
        }
        SegSample { image, labels }
    }
}

/// Stacks samples of equal size into one `[N,3,H,W]` batch and concatenated labels.
pub fn collate(samples: &[SegSample]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = Tensor::stack_batch(&images)?;
    Ok((batch, samples.iter().flat_map(|s| s.labels.iter().copied()).collect()))
}

/// Cityscapes-style colors for up to 19 classes.
pub const PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

/// Color image for a label map; the ignore id renders black.
pub fn render_mask(labels: &[u8], h: usize, w: usize, palette: &[[u8; 3]]) -> Result<Tensor> {
    if labels.len() != h * w {
        return Err(shape_err!("{} labels for a {h}x{w} mask", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_ID && l as usize >= palette.len()) {
        return Err(arg_err!("label {bad} has no palette entry ({} colors)", palette.len()));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let l = labels[y * w + x];
        if l == IGNORE_ID {
            0.0
        } else {
            palette[l as usize][c] as f64 / 255.0
        }
    }))
}

/// Smallest and largest typical object radius as fractions of the image side.
const RADIUS_RANGE: (f64, f64) = (0.04, 0.4);

/// Typical radius in pixels of objects of `class` (1 ≤ class < K).
pub fn class_radius(class: usize, classes: usize, size: usize) -> f64 {
    let (lo, hi) = RADIUS_RANGE;
    let t = if classes <= 2 { 0.0 } else { (class - 1) as f64 / (classes - 2) as f64 };
    size as f64 * hi * libm::pow(lo / hi, t)
}

/// Object classes in the smaller half of the size bands.
pub fn small_object_classes(classes: usize) -> Vec<usize> {
    (1..classes).filter(|&c| 2 * c > classes - 1).collect()
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh } => libm::fabs(x - cx) <= hw && libm::fabs(y - cy) <= hh,
            Shape::Circle { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Triangle { v } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                d.iter().all(|&s| s >= 0.0) || d.iter().all(|&s| s <= 0.0)
            }
        }
    }
}

fn random_shape(rng: &mut RngState, r: f64, size: usize) -> Shape {
    let cx = rng.range(0.0, size as f64);
    let cy = rng.range(0.0, size as f64);
    match rng.below(3) {
        0 => {
            let aspect = rng.range(0.7, 1.4);
            Shape::Rect { cx, cy, hw: r * aspect, hh: r / aspect }
        }
        1 => Shape::Circle { cx, cy, r },
        _ => {
            let rot = rng.range(0.0, core::f64::consts::TAU);
            // circumradius giving roughly the area of a circle of radius r
            let cr = r * 1.55;
            let v = core::array::from_fn(|i| {
                let a = rot + i as f64 * core::f64::consts::TAU / 3.0;
                (cx + cr * libm::cos(a), cy + cr * libm::sin(a))
            });
            Shape::Triangle { v }
        }
    }
}

/// Saturated hue for an object class, evenly spaced around the color wheel.
fn object_color(class: usize, classes: usize) -> [f64; 3] {
    let h = 6.0 * (class - 1) as f64 / (classes - 1) as f64;
    let f = h - libm::floor(h);
    let (v, p) = (0.95, 0.1);
    let (q, t) = (v - (v - p) * f, p + (v - p) * f);
    match h as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)
}

/// Sample `index` of the stream for `seed`, independent of how many are drawn.
pub fn gen_shapes_sample(seed: u64, index: usize, size: usize, classes: usize) -> Result<SegSample> {
    check_spec(size, classes)?;
    let mut rng = RngState::new(sample_seed(seed, index));

    let grey = rng.range(0.3, 0.6);
    let base: [f64; 3] = core::array::from_fn(|_| grey + rng.range(-0.03, 0.03));
    let freq = rng.range(0.15, 0.6);
    let phase = rng.range(0.0, core::f64::consts::TAU);
    let angle = rng.range(0.0, core::f64::consts::PI);
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));

    let count = 2 + rng.below(5);
    let mut objects: Vec<(usize, f64, Shape, [f64; 3])> = Vec::with_capacity(count);
    for i in 0..count {
        let class = match i {
            0 => 1,
            1 => classes - 1,
            _ => 1 + rng.below(classes - 1),
        };
        let r = class_radius(class, classes, size) * rng.range(0.85, 1.15);
        let shape = random_shape(&mut rng, r, size);
        let tint = object_color(class, classes);
        let jitter = rng.range(-0.08, 0.08);
        let color = core::array::from_fn(|c| (tint[c] + jitter).clamp(0.0, 1.0));
        objects.push((class, r, shape, color));
    }
    // larger objects first so small ones stay visible
    objects.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));

    let mut image = Tensor::zeros([1, 3, size, size]);
    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = 0.12 * libm::sin(freq * (px * dx + py * dy) + phase);
            let mut rgb = [base[0] + stripe, base[1] + stripe, base[2] + stripe];
            for (class, _, shape, color) in &objects {
                if shape.contains(px, py) {
                    labels[y * size + x] = *class as u8;
                    rgb = *color;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let noisy = v + 0.03 * rng.normal();
                image.set(0, c, y, x, noisy.clamp(0.0, 1.0));
            }
        }
    }
    SegSample::new(image, labels)
}

fn check_spec(size: usize, classes: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(arg_err!("image size {size} is not a positive multiple of 32"));
    }
    if !(2..=19).contains(&classes) {
        return Err(arg_err!("class count {classes} outside 2..=19"));
    }
    Ok(())
}

/// `count` square samples of side `size` with `classes` labels, deterministic per seed.
pub fn gen_shapes_dataset(seed: u64, count: usize, size: usize, classes: usize) -> Result<Vec<SegSample>> {
    check_spec(size, classes)?;
    (0..count).map(|i| gen_shapes_sample(seed, i, size, classes)).collect()
}

/// Pixel count per class id (`classes` entries); ignored pixels are skipped.
pub fn class_histogram(samples: &[SegSample], classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; classes];
    for s in samples {
        for &l in &s.labels {
            if (l as usize) < classes {
                hist[l as usize] += 1;
            }
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = gen_shapes_dataset(3, 4, 64, 4).unwrap();
        let b = gen_shapes_dataset(3, 4, 64, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bit_eq(&y.image));
            assert_eq!(x.labels, y.labels);
        }
        let c = gen_shapes_dataset(4, 1, 64, 4).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn prefix_stable() {
        let few = gen_shapes_dataset(5, 2, 32, 3).unwrap();
        let many = gen_shapes_dataset(5, 5, 32, 3).unwrap();
        assert_eq!(few[1], many[1]);
    }

    #[test]
    fn labels_in_range_and_images_bounded() {
        for s in gen_shapes_dataset(11, 8, 64, 6).unwrap() {
            s.check_labels(6).unwrap();
            assert!(s.image.min() >= 0.0 && s.image.max() <= 1.0);
            // background and the largest class are always present
            assert!(s.labels.contains(&0));
        }
    }

    #[test]
    fn radii_span_two_orders_of_area() {
        let big = class_radius(1, 4, 64);
        let small = class_radius(3, 4, 64);
        assert!(((big / small).powi(2) - 100.0).abs() < 1e-9);
        assert_eq!(small_object_classes(4), [2, 3]);
        assert_eq!(small_object_classes(5), [3, 4]);
    }

    #[test]
    fn object_colors_are_saturated_and_distinct() {
        for k in 2..=19 {
            let colors: Vec<[f64; 3]> = (1..k).map(|c| object_color(c, k)).collect();
            for (i, a) in colors.iter().enumerate() {
                let spread = a.iter().cloned().fold(0.0, f64::max) - a.iter().cloned().fold(1.0, f64::min);
                assert!(spread > 0.8, "{a:?}");
                for b in &colors[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn bad_specs() {
        assert!(gen_shapes_dataset(1, 1, 48, 4).is_err());
        assert!(gen_shapes_dataset(1, 1, 64, 1).is_err());
        assert!(gen_shapes_dataset(1, 1, 64, 20).is_err());
    }

    #[test]
    fn render_palette_and_ignore() {
        let m = render_mask(&[0, 1, IGNORE_ID, 2], 2, 2, &PALETTE).unwrap();
        assert_eq!(m.at(0, 0, 0, 1), 244.0 / 255.0);
        assert_eq!((m.at(0, 0, 1, 0), m.at(0, 1, 1, 0), m.at(0, 2, 1, 0)), (0.0, 0.0, 0.0));
        assert!(render_mask(&[3], 1, 1, &PALETTE[..3]).is_err());
        let black = render_mask(&[IGNORE_ID; 4], 2, 2, &PALETTE).unwrap();
        assert_eq!(black.max(), 0.0);
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = gen_shapes_sample(2, 0, 32, 4).unwrap();
        let f = s.flipped();
        assert_ne!(f.labels, s.labels);
        assert_eq!(f.flipped(), s);
    }
}

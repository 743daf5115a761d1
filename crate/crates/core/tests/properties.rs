use proptest::prelude::*;

use stdcma_core::adam::{adam_step, AdamState};
use stdcma_core::attention::fuse_pair;
use stdcma_core::dataset::gen_shapes_dataset;
use stdcma_core::deform::deform_conv2d;
use stdcma_core::loss::IGNORE_ID;
use stdcma_core::metrics::{argmax_labels, ConfusionMatrix};
use stdcma_core::network::{forward_eval, NetworkConfig, NetworkParams};
use stdcma_core::ops::{bilinear_resize, channel_concat};
use stdcma_core::{RngState, Tensor};

fn shape() -> impl Strategy<Value = [usize; 4]> {
    (1usize..=3, 1usize..=4, 1usize..=7, 1usize..=7).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_slice_is_identity(s in shape(), extra in 1usize..=4, seed: u64) {
        let mut rng = RngState::new(seed);
        let a = Tensor::randn(s, 1.0, &mut rng);
        let b = Tensor::randn([s[0], extra, s[2], s[3]], 1.0, &mut rng);
        let cat = channel_concat(&a, &b).unwrap();
        prop_assert!(cat.slice_channels(0, s[1]).unwrap().bit_eq(&a));
        prop_assert!(cat.slice_channels(s[1], extra).unwrap().bit_eq(&b));
    }

    #[test]
    fn equal_seeds_give_equal_tensors(s in shape(), seed: u64) {
        let a = Tensor::randn(s, 1.0, &mut RngState::new(seed));
        let b = Tensor::randn(s, 1.0, &mut RngState::new(seed));
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn resize_keeps_constants(s in shape(), oh in 1usize..=12, ow in 1usize..=12, v in -5.0f64..5.0) {
        let r = bilinear_resize(&Tensor::full(s, v), oh, ow).unwrap();
        prop_assert!(r.data().iter().all(|&x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn deform_sampling_is_translation_consistent(seed: u64, dx in 1usize..=2, dy in 0usize..=2) {
        let mut rng = RngState::new(seed);
        let (h, w) = (9, 10);
        let x = Tensor::randn([1, 2, h, w], 1.0, &mut rng);
        // input moved right by dx and down by dy
        let moved = Tensor::from_fn([1, 2, h, w], |_, c, y, xx| {
            if y >= dy && xx >= dx { x.at(0, c, y - dy, xx - dx) } else { 0.0 }
        });
        let wt = Tensor::randn([3, 2, 3, 3], 1.0, &mut rng);
        let off = Tensor::uniform([1, 18, h, w], -0.8, 0.8, &mut rng);
        let shifted = Tensor::from_fn([1, 18, h, w], |_, c, y, xx| {
            off.at(0, c, y, xx) + if c % 2 == 0 { dx as f64 } else { dy as f64 }
        });
        let a = deform_conv2d(&x, &off, &wt, None, 1, 1).unwrap();
        let b = deform_conv2d(&moved, &shifted, &wt, None, 1, 1).unwrap();
        for c in 0..3 {
            for y in 2..h - 4 {
                for xx in 2..w - 4 {
                    prop_assert!((a.at(0, c, y, xx) - b.at(0, c, y, xx)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fusion_is_convex_and_keeps_agreed_argmax(seed: u64, k in 2usize..=5) {
        let mut rng = RngState::new(seed);
        let low = Tensor::randn([2, k, 4, 4], 2.0, &mut rng);
        let high = Tensor::randn([2, k, 4, 4], 2.0, &mut rng);
        let alpha = Tensor::uniform([2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let fused = fuse_pair(&low, &high, &alpha).unwrap();
        for ((f, l), h) in fused.data().iter().zip(low.data()).zip(high.data()) {
            prop_assert!(*f >= l.min(*h) - 1e-12 && *f <= l.max(*h) + 1e-12);
        }
        let (al, ah, af) = (argmax_labels(&low), argmax_labels(&high), argmax_labels(&fused));
        for i in 0..al.len() {
            if al[i] == ah[i] {
                prop_assert_eq!(af[i], al[i]);
            }
        }
    }

    #[test]
    fn miou_is_equivariant_under_relabeling(seed: u64, k in 2usize..=6, len in 1usize..=80) {
        let mut rng = RngState::new(seed);
        let pred: Vec<u8> = (0..len).map(|_| rng.below(k) as u8).collect();
        let truth: Vec<u8> = (0..len).map(|_| rng.below(k) as u8).collect();
        let mut perm: Vec<u8> = (0..k as u8).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let mut a = ConfusionMatrix::new(k);
        a.add_labels(&pred, &truth, IGNORE_ID).unwrap();
        let mut b = ConfusionMatrix::new(k);
        let map = |v: &[u8]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<u8>>();
        b.add_labels(&map(&pred), &map(&truth), IGNORE_ID).unwrap();
        prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-15);
        for c in 0..k {
            prop_assert_eq!(a.iou(c), b.iou(perm[c] as usize));
        }
    }

    #[test]
    fn confusion_total_counts_non_ignored(seed: u64, batches in prop::collection::vec(1usize..=40, 1..5)) {
        let mut rng = RngState::new(seed);
        let mut cm = ConfusionMatrix::new(3);
        let mut expected = 0u64;
        for len in batches {
            let truth: Vec<u8> = (0..len).map(|_| if rng.uniform() < 0.3 { IGNORE_ID } else { rng.below(3) as u8 }).collect();
            let pred: Vec<u8> = (0..len).map(|_| rng.below(3) as u8).collect();
            expected += truth.iter().filter(|&&t| t != IGNORE_ID).count() as u64;
            cm.add_labels(&pred, &truth, IGNORE_ID).unwrap();
        }
        prop_assert_eq!(cm.total(), expected);
    }

    #[test]
    fn zero_learning_rate_is_identity(seed: u64, len in 1usize..=20) {
        let mut rng = RngState::new(seed);
        let mut params = std::collections::BTreeMap::new();
        params.insert("w".to_string(), Tensor::randn([1, 1, 1, len], 1.0, &mut rng));
        let before = params.clone();
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), Tensor::randn([1, 1, 1, len], 1.0, &mut rng));
        let mut state = AdamState::new(0.0);
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        prop_assert!(params["w"].bit_eq(&before["w"]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn logits_match_input_extent(n in 1usize..=2, hb in 1usize..=2, wb in 1usize..=3, seed: u64) {
        let mut cfg = NetworkConfig::toy(3);
        cfg.stage_blocks = [1, 1, 1];
        let params = NetworkParams::init(cfg, &mut RngState::new(seed)).unwrap();
        let image = Tensor::uniform([n, 3, 32 * hb, 32 * wb], 0.0, 1.0, &mut RngState::new(seed ^ 1));
        let a = forward_eval(&params, &image).unwrap();
        prop_assert_eq!(a.logits.shape(), [n, 3, 32 * hb, 32 * wb]);
        let b = forward_eval(&params, &image).unwrap();
        prop_assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn dataset_regenerates_identically(seed: u64, k in 2usize..=19) {
        let a = gen_shapes_dataset(seed, 3, 32, k).unwrap();
        let b = gen_shapes_dataset(seed, 3, 32, k).unwrap();
        prop_assert_eq!(a, b);
    }
}

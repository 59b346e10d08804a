use icl_core::autodiff::Tape;
use icl_core::checkpoint::Checkpoint;
use icl_core::data::Augment;
use icl_core::metrics::{dsc, hd95, ClassMask};
use icl_core::oracle;
use icl_core::tensor::{LabelMap, Tensor};
use proptest::prelude::*;

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, len)
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = ClassMask> {
    prop::collection::vec(prop::bool::weighted(0.3), h * w)
        .prop_map(move |d| ClassMask::new(h, w, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_columns_are_distributions(z in 1usize..5, n in 1usize..7, seed in any::<u64>()) {
        let data: Vec<f64> = (0..z * n).map(|i| ((seed >> (i % 60)) as f64 * 1e-3 + i as f64 * 0.7).sin() * 30.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[z, n], data).unwrap());
        let p = tape.softmax(x, 0).unwrap();
        let p = tape.value(p);
        for col in 0..n {
            let s: f64 = (0..z).map(|r| p.at(&[r, col])).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!((0..z).all(|r| p.at(&[r, col]) >= 0.0));
        }
    }

    #[test]
    fn softmax_ignores_a_shift_of_the_logits(v in values(12), shift in -50.0..50.0f64) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[3, 4], v.clone()).unwrap());
        let b = tape.constant(Tensor::new(&[3, 4], v.iter().map(|x| x + shift).collect()).unwrap());
        let (pa, pb) = (tape.softmax(a, 0).unwrap(), tape.softmax(b, 0).unwrap());
        prop_assert!(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-12);
    }

    #[test]
    fn dsc_and_hd95_are_symmetric(a in mask(7, 9), b in mask(7, 9)) {
        let (ab, ba) = (dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn a_mask_matches_itself(a in mask(8, 8)) {
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_the_brute_force_oracles(a in mask(6, 10), b in mask(6, 10)) {
        prop_assert_eq!(dsc(&a, &b).unwrap(), oracle::dsc(&a, &b));
        prop_assert_eq!(hd95(&a, &b).unwrap(), oracle::hd95(&a, &b));
    }

    #[test]
    fn augmentation_permutes_pixels_and_moves_labels_with_them(
        flip_h in any::<bool>(), flip_v in any::<bool>(), turns in 0u8..4, labels in prop::collection::vec(0u8..4, 36)
    ) {
        let aug = Augment { flip_h, flip_v, quarter_turns: turns };
        // The image carries each pixel's label and index, so a permutation
        // keeps the multiset of values and the label channel agrees with the mask.
        let image = Tensor::from_fn(&[1, 6, 6], |i| labels[i] as f64 * 100.0 + i as f64);
        let mask = LabelMap::new(6, 6, labels.clone()).unwrap();
        let (img, m) = aug.apply(&image, Some(&mask));
        let m = m.unwrap();
        let mut before = image.data().to_vec();
        let mut after = img.data().to_vec();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        prop_assert_eq!(before, after);
        for (v, &l) in img.data().iter().zip(&m.data) {
            prop_assert_eq!((v / 100.0).floor() as u8, l);
        }
    }

    #[test]
    fn detached_branch_gets_no_gradient(v in values(6), w in values(6)) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3], v).unwrap());
        let y = tape.param(Tensor::new(&[2, 3], w).unwrap());
        let xd = tape.detach(x);
        let prod = tape.mul(xd, y).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let gx = g.get_or_zeros(x, tape.value(x));
        prop_assert!(gx.data().iter().all(|&d| d == 0.0));
        let gy = g.get_or_zeros(y, tape.value(y));
        prop_assert_eq!(gy.data(), tape.value(x).data());
    }

    #[test]
    fn gradient_is_linear_in_the_loss_scale(a in values(6), b in values(8), k in -3.0..3.0f64) {
        let grad = |scale: f64| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(&[3, 2], a.clone()).unwrap());
            let y = tape.constant(Tensor::new(&[2, 4], b.clone()).unwrap());
            let h = tape.matmul(x, y).unwrap();
            let h = tape.gelu(h);
            let s = tape.sum(h);
            let s = tape.scale(s, scale);
            tape.backward(s).unwrap().get_or_zeros(x, tape.value(x))
        };
        let (g1, gk) = (grad(1.0), grad(k));
        prop_assert!(g1.map(|v| v * k).max_abs_diff(&gk) < 1e-12);
    }

    #[test]
    fn upsampling_keeps_constants(c in -5.0..5.0f64, h in 1usize..5, w in 1usize..5, f in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2, h, w], c));
        let up = tape.bilinear_upsample(x, h * f, w * f).unwrap();
        prop_assert!(tape.value(up).data().iter().all(|&v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn one_hot_then_argmax_is_identity(labels in prop::collection::vec(0u8..5, 20)) {
        let m = LabelMap::new(4, 5, labels).unwrap();
        prop_assert_eq!(LabelMap::argmax(&m.one_hot(5).unwrap()).unwrap(), m);
    }

    #[test]
    fn checkpoint_bytes_round_trip(v in values(10), name in "[a-z.]{1,12}") {
        let mut c = Checkpoint::new();
        c.push(name, Tensor::new(&[2, 5], v).unwrap());
        c.push("meta.iter", Tensor::scalar(3.0));
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.encode(), bytes);
    }
}

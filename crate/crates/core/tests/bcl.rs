mod common;

use bcmf::bcl::{boundary_loss, col_flip, flip_ce_maps, probabilities, row_flip, select_hard, selection_size};
use bcmf::{BclConfig, LabelMap, Tensor};
use proptest::prelude::*;

fn label_map() -> impl Strategy<Value = LabelMap> {
    (1usize..12, 1usize..12, 2usize..6).prop_flat_map(|(h, w, m)| {
        prop::collection::vec(prop_oneof![9 => 0..m as u32, 1 => Just(255u32)], h * w)
            .prop_map(move |v| LabelMap::new(h, w, m, 255, v).unwrap())
    })
}

fn sorted(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn flips_are_involutions_and_keep_line_multisets(g in label_map(), s in 0usize..7) {
        let r = row_flip(&g, s);
        let c = col_flip(&g, s);
        prop_assert_eq!(&row_flip(&r, s), &g);
        prop_assert_eq!(&col_flip(&c, s), &g);
        let (h, w) = (g.height(), g.width());
        for y in 0..h {
            let line = |m: &LabelMap| sorted((0..w).map(|x| m.get(y, x)).collect());
            prop_assert_eq!(line(&r), line(&g));
        }
        for x in 0..w {
            let line = |m: &LabelMap| sorted((0..h).map(|y| m.get(y, x)).collect());
            prop_assert_eq!(line(&c), line(&g));
        }
        if s == 0 {
            prop_assert_eq!(&r, &g);
            prop_assert_eq!(&c, &g);
        }
    }
}

proptest! {
    #[test]
    fn selection_size_rule(values in prop::collection::vec(0.0f64..5.0, 0..60), theta in 0.01f64..=1.0, min_kept in 0usize..80) {
        let kept: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
        let sel = select_hard(&kept, theta, min_kept);
        let want = ((theta * kept.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(sel.len(), want.max(min_kept.min(kept.len())));
        prop_assert_eq!(sel.len(), selection_size(kept.len(), theta, min_kept));
        let all = select_hard(&kept, 1.0, min_kept);
        prop_assert!(sel.iter().all(|p| all.contains(p)));
        // every selected value dominates every unselected one
        let lowest = sel.iter().map(|&p| values[p]).fold(f64::INFINITY, f64::min);
        prop_assert!((0..values.len()).filter(|p| !sel.contains(p)).all(|p| values[p] <= lowest));
    }

    #[test]
    fn boundary_loss_ignores_per_pixel_logit_shifts(seed in any::<u64>()) {
        let mut g = common::Gen::new(seed);
        let x = g.tensor(&[2, 3, 6, 7]);
        let gt: Vec<_> = (0..2).map(|_| g.labels(6, 7, 3, 0.1)).collect();
        let shift: Vec<f64> = (0..2 * 42).map(|_| g.uniform(-3.0, 3.0)).collect();
        let mut shifted = x.data().to_vec();
        for (i, v) in shifted.iter_mut().enumerate() {
            let (n, p) = (i / (3 * 42), i % 42);
            *v += shift[n * 42 + p];
        }
        let shifted = Tensor::new([2, 3, 6, 7], shifted).unwrap();
        let cfg = BclConfig { min_kept: 4, ..BclConfig::default() };
        let a = boundary_loss(&probabilities(&x).unwrap(), &gt, &cfg).unwrap();
        let b = boundary_loss(&probabilities(&shifted).unwrap(), &gt, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn flip_ce_vanishes_on_uniform_blocks(g in label_map(), s in 1usize..4) {
        let (h, w, m) = (g.height(), g.width(), g.num_classes());
        // one-hot probabilities of the ground truth; ignored pixels get class 0
        let mut p = vec![0.0; m * h * w];
        for i in 0..h * w {
            p[g.class_at(i).unwrap_or(0) * h * w + i] = 1.0;
        }
        let probs = Tensor::new([1, m, h, w], p).unwrap();
        let (rows, cols) = flip_ce_maps(&probs, std::slice::from_ref(&g), s).unwrap();
        for y in 0..h {
            for x in 0..w {
                let start = x / (2 * s) * 2 * s;
                if start + 2 * s <= w && (start..start + 2 * s).all(|xx| g.class_at(y * w + xx) == g.class_at(y * w + x)) {
                    prop_assert_eq!(rows.data()[y * w + x], 0.0);
                }
                let start = y / (2 * s) * 2 * s;
                if start + 2 * s <= h && (start..start + 2 * s).all(|yy| g.class_at(yy * w + x) == g.class_at(y * w + x)) {
                    prop_assert_eq!(cols.data()[y * w + x], 0.0);
                }
            }
        }
    }
}

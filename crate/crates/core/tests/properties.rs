use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tempotrack_core::bsi::{apply_suppression, select_filter_mask};
use tempotrack_core::encoder::{Modality, ModalityTokens, TokenLayout};
use tempotrack_core::head::{decode_bbox, HeadOutput};
use tempotrack_core::metrics::{iou, precision_rate, success_rate, PixelBox};
use tempotrack_core::ssm::scan;
use tempotrack_core::tsg::TemporalQueue;
use tempotrack_core::{oracle, Graph, Tensor};

fn pixel_box() -> impl Strategy<Value = PixelBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64).prop_map(|(x, y, w, h)| PixelBox::new(x, y, w, h))
}

proptest! {
    #[test]
    fn mask_count_and_ordering(scores in vec(-3.0..3.0f64, 1..300), lambda in 0.0..1.0f64) {
        let mask = select_filter_mask(&scores, lambda);
        let k = (lambda * scores.len() as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(mask.count(), k);
        let worst_kept = (0..scores.len()).filter(|&i| !mask.suppressed[i]).map(|i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in mask.indices() {
            prop_assert!(scores[i] <= worst_kept);
        }
        prop_assert_eq!(mask.indices().collect::<Vec<_>>(), oracle::lowest_k(&scores, k));
    }

    #[test]
    fn mask_ties_go_to_lower_indices(n in 1usize..100, lambda in 0.0..1.0f64) {
        let mask = select_filter_mask(&vec![0.25; n], lambda);
        let k = mask.count();
        prop_assert!(mask.suppressed[..k].iter().all(|&s| s));
        prop_assert!(mask.suppressed[k..].iter().all(|&s| !s));
    }

    #[test]
    fn suppression_is_idempotent(seed in any::<u64>(), lambda in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::new((2, 2), (3, 3), 1, 4);
        let mut g = Graph::new();
        let tokens = ModalityTokens {
            tokens: g.constant(Tensor::randn(&[layout.len(), 4], 1.0, &mut rng)),
            layout,
            modality: Modality::Rgb,
        };
        let scores: Vec<f64> = Tensor::randn(&[layout.n_s], 1.0, &mut rng).data().to_vec();
        let mask = select_filter_mask(&scores, lambda);
        let once = apply_suppression(&mut g, &tokens, &mask).unwrap();
        let twice = apply_suppression(&mut g, &once, &mask).unwrap();
        prop_assert_eq!(g.value(once.tokens), g.value(twice.tokens));
        let d = 4;
        let out = g.value(once.tokens);
        for r in 0..layout.len() {
            let row = &out.data()[r * d..(r + 1) * d];
            let zeroed = r >= layout.n_z && r < layout.n_z + layout.n_s && mask.suppressed[r - layout.n_z];
            if zeroed {
                prop_assert!(row.iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(row, &g.value(tokens.tokens).data()[r * d..(r + 1) * d]);
            }
        }
    }

    #[test]
    fn queue_keeps_the_latest_m(m in 1usize..8, pushes in 0usize..30) {
        let mut q = TemporalQueue::new(m);
        for i in 0..pushes {
            q.push(Tensor::full(&[1, 2], i as f64));
        }
        prop_assert_eq!(q.len(), pushes.min(m));
        let got: Vec<f64> = q.iter().map(|t| t.data()[0]).collect();
        let want: Vec<f64> = (pushes.saturating_sub(m)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in pixel_box(), b in pixel_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(iou(&a, &a) > 1.0 - 1e-12);
    }

    #[test]
    fn success_rate_is_monotone_in_overlap(gts in vec(pixel_box(), 1..20), shift in 0.0..30.0f64, extra in 0.0..30.0f64) {
        let moved = |s: f64| gts.iter().map(|g| PixelBox::new(g.x + s, g.y, g.w, g.h)).collect::<Vec<_>>();
        let near = success_rate(&moved(shift), &gts).unwrap();
        let far = success_rate(&moved(shift + extra), &gts).unwrap();
        prop_assert!(far <= near + 1e-12);
        let pr_near = precision_rate(&moved(shift), &gts, 20.0).unwrap();
        let pr_far = precision_rate(&moved(shift + extra), &gts, 20.0).unwrap();
        prop_assert!(pr_far <= pr_near);
    }

    #[test]
    fn success_rate_matches_enumeration(gts in vec(pixel_box(), 1..20), preds_seed in vec(pixel_box(), 20)) {
        let preds = &preds_seed[..gts.len()];
        let ious: Vec<f64> = preds.iter().zip(&gts).map(|(p, g)| iou(p, g)).collect();
        let sr = success_rate(preds, &gts).unwrap();
        prop_assert!((sr - oracle::success_rate(&ious)).abs() < 1e-12);
    }

    #[test]
    fn decode_follows_argmax_under_monotone_maps(cls in vec(-5.0..5.0f64, 16), off in vec(0.0..1.0f64, 32), size in vec(0.01..1.0f64, 32), scale in 0.1..10.0f64, bias in -3.0..3.0f64) {
        let out = HeadOutput {
            cls_map: Tensor::new(vec![4, 4], cls.clone()).unwrap(),
            offset_map: Tensor::new(vec![2, 4, 4], off.clone()).unwrap(),
            size_map: Tensor::new(vec![2, 4, 4], size.clone()).unwrap(),
        };
        let warped = HeadOutput {
            cls_map: Tensor::new(vec![4, 4], cls.iter().map(|v| scale * v + bias).collect()).unwrap(),
            ..out.clone()
        };
        prop_assert_eq!(out.peak().0, warped.peak().0);
        prop_assert_eq!(out.peak().1, warped.peak().1);
        prop_assert_eq!(decode_bbox(&out), decode_bbox(&warped));
    }

    #[test]
    fn zoh_stays_in_range(a in -50.0..-1e-6f64, delta in 1e-6..10.0f64, b in -3.0..3.0f64) {
        let (a_bar, b_bar) = scan::zoh_discretize(a, delta, b).unwrap();
        prop_assert!(a_bar > 0.0 && a_bar < 1.0);
        // |B̄| = |b|·(1 − Ā)/|a| never exceeds Δ·|b|
        prop_assert!(b_bar.abs() <= delta * b.abs() * (1.0 + 1e-12));
    }
}

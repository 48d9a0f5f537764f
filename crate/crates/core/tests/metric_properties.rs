//! Property tests for the detection metrics and the alignment math.

use leapd::alignment::{class_probabilities_raw, domain_invariant_loss, domain_specific_loss};
use leapd::bbox::{iou, BBox};
use leapd::detector::Detection;
use leapd::evaluation::{coco_thresholds, map_metrics, ImageEval};
use leapd::sample::{CategorySet, GtBox};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0u8..24, 0u8..24, 2u8..10, 2u8..10).prop_map(|(x, y, w, h)| BBox::new(x.into(), y.into(), w.into(), h.into()))
}

fn image() -> impl Strategy<Value = ImageEval> {
    (
        prop::collection::vec((bbox(), 1u32..=3), 0..4),
        prop::collection::vec((bbox(), 1u32..=3, 1u8..=10), 0..5),
    )
        .prop_map(|(gts, dets)| ImageEval {
            id: String::new(),
            ground_truth: gts.into_iter().map(|(bbox, category)| GtBox { bbox, category }).collect(),
            detections: dets
                .into_iter()
                .map(|(bbox, category, s)| Detection {
                    bbox,
                    category,
                    score: f64::from(s) / 10.0,
                })
                .collect(),
            ignore_regions: vec![],
        })
}

fn categories() -> CategorySet {
    CategorySet::new(vec![(1, "a".into()), (2, "b".into()), (3, "c".into())]).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_never_rises_with_a_stricter_threshold(images in prop::collection::vec(image(), 1..4)) {
        let report = map_metrics(&images, &categories());
        for c in &report.per_category {
            prop_assert_eq!(c.ap.len(), coco_thresholds().len());
            for w in c.ap.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", c.ap);
            }
        }
        if let (Some(m50), Some(m5095)) = (report.map50, report.map50_95) {
            prop_assert!(m5095 <= m50 + 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_detection_order(images in prop::collection::vec(image(), 1..4), seed in any::<u64>()) {
        // distinct scores make the ranking independent of input order
        let mut images = images;
        let mut k = 0.0;
        for im in &mut images {
            for d in &mut im.detections {
                k += 1.0;
                d.score = 1.0 / (1.0 + k + (seed % 7) as f64);
            }
        }
        let before = map_metrics(&images, &categories());
        for im in &mut images {
            im.detections.reverse();
        }
        images.reverse();
        let after = map_metrics(&images, &categories());
        prop_assert_eq!(before.map50, after.map50);
        prop_assert_eq!(before.map75, after.map75);
        prop_assert_eq!(before.map50_95, after.map50_95);
    }

    #[test]
    fn probabilities_sum_to_one(
        v in prop::collection::vec(-1.0f64..1.0, 4),
        prompts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        tau in 0.005f64..1.0,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(prompts.iter().all(|p| p.iter().any(|x| x.abs() > 1e-3)));
        let refs: Vec<&[f64]> = prompts.iter().map(Vec::as_slice).collect();
        let p = class_probabilities_raw(&v, &refs, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn domain_losses_are_nonnegative_and_zero_only_at_one(s in 1e-7f64..=1.0, ds in prop::collection::vec(1e-7f64..=1.0, 1..5)) {
        let l = domain_invariant_loss(s, 1e-7).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, s == 1.0);
        let m = domain_specific_loss(&ds, 1e-7).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m == 0.0, ds.iter().all(|&d| d == 1.0));
    }
}

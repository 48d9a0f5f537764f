//! COCO-style metrics on a hand-built prediction set, then a comparison
//! table with deltas against a baseline run.
//!
//! cargo run --example evaluate_and_compare

use leapd::bbox::BBox;
use leapd::detector::Detection;
use leapd::evaluation::{compare_runs, map_metrics, EvalReport, ImageEval};
use leapd::sample::{CategorySet, GtBox};

fn report(map50: f64, map75: f64, map50_95: f64) -> EvalReport {
    EvalReport {
        map50: Some(map50),
        map75: Some(map75),
        map50_95: Some(map50_95),
        per_category: vec![],
        images: 0,
        gt_boxes: 0,
        detections: 0,
    }
}

fn main() -> leapd::Result<()> {
    let gt = |x: f64, category: u32| GtBox {
        bbox: BBox::new(x, 10.0, 10.0, 10.0),
        category,
    };
    let det = |x: f64, category: u32, score: f64| Detection {
        bbox: BBox::new(x, 10.0, 10.0, 10.0),
        category,
        score,
    };
    let images = vec![
        ImageEval {
            id: "a".into(),
            ground_truth: vec![gt(0.0, 4), gt(30.0, 5)],
            // one exact hit, one shifted by 2 px (IoU 2/3), one false positive
            detections: vec![det(0.0, 4, 0.9), det(32.0, 5, 0.8), det(60.0, 4, 0.7)],
            ignore_regions: vec![],
        },
        ImageEval {
            id: "b".into(),
            ground_truth: vec![gt(5.0, 6)],
            detections: vec![],
            ignore_regions: vec![BBox::new(40.0, 0.0, 30.0, 30.0)],
        },
    ];
    let r = map_metrics(&images, &CategorySet::synthetic());
    print!("{}", r.to_text());

    let runs = vec![
        ("detector_only".to_string(), report(0.397, 0.248, 0.237)),
        ("manual".to_string(), report(0.405, 0.250, 0.240)),
        ("learnable".to_string(), report(0.421, 0.255, 0.248)),
    ];
    let cmp = compare_runs(&runs, "detector_only")?;
    print!("{}", cmp.to_text());
    print!("{}", cmp.to_jsonl()?);
    Ok(())
}

//! Builds the anchor detector, inspects its feature pyramid and anchors,
//! and runs inference on one synthetic scene.
//!
//! cargo run --example detector_inference

use leapd::config::{DomainClasses, RunConfig};
use leapd::datasets::{generate_scene, SceneSpec};
use leapd::graph::Graph;
use leapd::sample::CategorySet;
use leapd::training::Model;

fn main() -> leapd::Result<()> {
    let cfg = RunConfig::default().with("score_threshold", "0.3")?;
    let scene = generate_scene(&SceneSpec {
        domain: "low,front,day".parse()?,
        object_count: 4,
        canvas: (64, 64),
        seed: 11,
    })?;
    let classes = DomainClasses::from_observed([scene.domain])?;
    let model = Model::new(&cfg, CategorySet::synthetic(), Some(classes))?;

    let mut g = Graph::new(&model.store);
    let x = g.constant(scene.image.clone());
    let pyramid = model.detector.pyramid(&mut g, x)?;
    let mut grids = Vec::new();
    for (level, stride) in pyramid.levels.iter().zip(&pyramid.strides) {
        let shape = g.value(*level).shape().to_vec();
        println!("stride {stride:2}: feature map {shape:?}");
        grids.push((shape[1], shape[2]));
    }
    println!("{} anchors", model.detector.anchors(&grids).len());
    println!("{} detector parameters", model.detector_param_count());

    let detections = model.detect(&scene.image)?;
    println!("ground truth: {} boxes", scene.boxes.len());
    println!("untrained detector: {} detections above {}", detections.len(), cfg.score_threshold);
    for d in detections.iter().take(5) {
        println!("  {:?} category {} score {:.3}", d.bbox, d.category, d.score);
    }
    Ok(())
}

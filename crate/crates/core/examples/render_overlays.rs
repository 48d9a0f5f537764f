//! Draws ground truth (green) and detections (red, with scores) onto a few
//! synthetic scenes after a short training run.
//!
//! cargo run --release --example render_overlays -- [out_dir]

use std::path::PathBuf;

use leapd::config::{DomainLabel, RunConfig};
use leapd::datasets::{synthetic_index, Split};
use leapd::render::render_overlays;
use leapd::training::{fit, FitOptions};

fn main() -> leapd::Result<()> {
    env_logger::init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("leapd_overlays"));
    let cfg = RunConfig::default()
        .with("prompt_mode", "detector_only")?
        .with("epochs", "4")?
        .with("score_threshold", "0.3")?;
    let domains: Vec<DomainLabel> = vec!["low,front,day".parse()?];
    let train_idx = synthetic_index(&domains, 48, 1, cfg.image_size, Split::Train);
    let train = train_idx.load_all(cfg.image_size, cfg.channels)?;
    let result = fit(&cfg, &train_idx.categories, &train, None, FitOptions::default(), &mut std::io::sink())?;

    let show = synthetic_index(&domains, 5, 2, cfg.image_size, Split::Val);
    let summary = render_overlays(&result.state.model, &show, &out)?;
    for p in &summary.written {
        println!("{}", p.display());
    }
    println!("{} written, {} skipped", summary.written.len(), summary.skipped);
    Ok(())
}

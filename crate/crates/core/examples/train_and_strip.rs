//! Trains a small model, saves a checkpoint, strips the domain modules and
//! checks that the stripped detector predicts exactly the same boxes.
//!
//! cargo run --release --example train_and_strip -- [learnable|manual|detector_only] [--two-step]

use leapd::config::{DomainLabel, RunConfig};
use leapd::datasets::make_domain_split;
use leapd::training::{strip_domain_modules, train, FitOptions, Model};

fn main() -> leapd::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.iter().find(|a| !a.starts_with("--")).map_or("learnable", String::as_str);
    let two_step = args.iter().any(|a| a == "--two-step");

    let cfg = RunConfig::default()
        .with("prompt_mode", mode)?
        .with("epochs", "3")?
        .with("two_step_prompt_epochs", "2")?;
    let train_domains: Vec<DomainLabel> = vec!["low,front,day".parse()?, "medium,bird,night".parse()?];
    let heldout: Vec<DomainLabel> = vec!["low,side,foggy".parse()?];
    let (train_idx, held_idx) = make_domain_split(&train_domains, &heldout, 24, cfg.seed, cfg.image_size)?;

    let dir = tempfile_dir();
    let outcome = train(&cfg, &train_idx, Some(&held_idx), FitOptions { two_step }, &dir)?;
    let steps = train_idx.len().div_ceil(cfg.batch_size);
    for (e, (total, report)) in outcome
        .result
        .epoch_means(steps, |l| l.l_total)
        .iter()
        .zip(&outcome.result.evaluations)
        .enumerate()
    {
        println!("epoch {e}: L_total {total:.4}  held-out mAP50 {:.4}", report.map50_or_zero());
    }

    let stripped_path = dir.join("stripped.bin");
    strip_domain_modules(&outcome.checkpoint, &stripped_path)?;
    let (full, _) = Model::load(&outcome.checkpoint)?;
    let (stripped, _) = Model::load(&stripped_path)?;
    let size = |p: &std::path::Path| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0);
    println!(
        "checkpoint {} bytes, stripped {} bytes",
        size(&outcome.checkpoint),
        size(&stripped_path)
    );
    let held = held_idx.load_all(cfg.image_size, cfg.channels)?;
    let same = held
        .iter()
        .all(|s| full.detect(&s.image).ok() == stripped.detect(&s.image).ok());
    println!("stripped detections identical on {} held-out images: {same}", held.len());
    if let Err(e) = stripped.prompt_embeddings() {
        println!("prompt embeddings from the stripped model: {e}");
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("leapd_train_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}

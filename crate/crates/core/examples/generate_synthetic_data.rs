//! Renders a synthetic domain-shift split and writes it in the VisDrone
//! layout, then reloads it through the regular VisDrone loader.
//!
//! cargo run --example generate_synthetic_data -- [out_dir]

use std::path::PathBuf;

use leapd::config::DomainLabel;
use leapd::datasets::{load_visdrone, make_domain_split, write_dataset, Split};
use leapd::sample::CategorySet;

fn main() -> leapd::Result<()> {
    env_logger::init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("leapd_synthetic"));

    let train: Vec<DomainLabel> = ["low,front,day".parse()?, "high,bird,day".parse()?].to_vec();
    let heldout: Vec<DomainLabel> = vec!["medium,side,night".parse()?];
    let (train_idx, held_idx) = make_domain_split(&train, &heldout, 12, 7, 64)?;

    for (name, idx) in [("train", &train_idx), ("heldout", &held_idx)] {
        let samples = idx.load_all(64, 3)?;
        write_dataset(&samples, &out.join(name))?;
        let boxes: usize = samples.iter().map(|s| s.boxes.len()).sum();
        let mean_area = samples
            .iter()
            .flat_map(|s| s.boxes.iter().map(|b| b.bbox.area()))
            .sum::<f64>()
            / boxes.max(1) as f64;
        println!("{name:8} {:3} scenes  {boxes:3} boxes  mean box area {mean_area:6.1}", samples.len());
        for (domain, count) in idx.domain_counts() {
            println!("         {domain}: {count}");
        }
    }

    let reloaded = load_visdrone(
        &out.join("train"),
        None,
        "low,front,day".parse()?,
        CategorySet::synthetic(),
        Split::Train,
    )?;
    println!("reloaded {} training images from {}", reloaded.len(), out.display());
    Ok(())
}

//! Trains one model per number of learnable context vectors plus a
//! manual-prompt model and prints the resulting table.
//!
//! cargo run --release --example prompt_length_ablation -- [epochs]

use leapd::config::{DomainLabel, RunConfig};
use leapd::datasets::make_domain_split;
use leapd::evaluation::ablate_prompt_length;
use leapd::prompting::ABLATION_LENGTHS;

fn main() -> leapd::Result<()> {
    env_logger::init();
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "2".into());
    let cfg = RunConfig::default().with("epochs", &epochs)?;
    let train_domains: Vec<DomainLabel> = vec!["low,front,day".parse()?, "medium,bird,night".parse()?];
    let heldout: Vec<DomainLabel> = vec!["low,side,foggy".parse()?];
    let (train_idx, held_idx) = make_domain_split(&train_domains, &heldout, 24, cfg.seed, cfg.image_size)?;
    let train = train_idx.load_all(cfg.image_size, cfg.channels)?;
    let held = held_idx.load_all(cfg.image_size, cfg.channels)?;

    let table = ablate_prompt_length(&ABLATION_LENGTHS, &cfg, &train_idx.categories, &train, &held)?;
    print!("{}", table.to_text());
    for row in &table.rows {
        println!(
            "{:<11} differs in {:?}, detector params {}",
            row.label, row.config_diff, row.detector_params
        );
    }
    Ok(())
}

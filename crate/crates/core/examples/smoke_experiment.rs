//! Trains on two synthetic shooting conditions and evaluates on a held-out
//! one. Prints per-epoch loss means and the held-out mAP.
//!
//! cargo run --release --example smoke_experiment -- [prompt_mode] [seed] [key=value ...]

use leapd::config::{PromptMode, RunConfig};
use leapd::datasets::make_domain_split;
use leapd::training::{fit, FitOptions};

fn main() -> leapd::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let mode: PromptMode = args.get(1).map_or(Ok(PromptMode::Learnable), |s| s.parse())?;
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut cfg = RunConfig::default()
        .with("prompt_mode", &mode.to_string())?
        .with("seed", &seed.to_string())?;
    for (k, v) in leapd::config::parse_overrides(args.get(3..).unwrap_or_default())? {
        cfg.set(&k, &v)?;
    }
    let train_domains = ["low,front,day".parse()?, "medium,bird,night".parse()?];
    let heldout = ["low,side,foggy".parse()?];
    let (train_idx, held_idx) = make_domain_split(&train_domains, &heldout, 100, seed, cfg.image_size)?;
    let train = train_idx.load_all(cfg.image_size, cfg.channels)?;
    let held = held_idx.truncated(50).load_all(cfg.image_size, cfg.channels)?;

    let start = std::time::Instant::now();
    let result = fit(&cfg, &train_idx.categories, &train, None, FitOptions::default(), &mut std::io::sink())?;
    let steps = train.len().div_ceil(cfg.batch_size);
    let lp = result.epoch_means(steps, |l| l.l_lp);
    let od = result.epoch_means(steps, |l| l.l_od);
    let total = result.epoch_means(steps, |l| l.l_total);
    for e in 0..lp.len() {
        println!("epoch {e:2}  L_od {:.4}  L_lp {:.4}  L_total {:.4}", od[e], lp[e], total[e]);
    }
    let (report, _) = result.state.model.evaluate(&held)?;
    let (train_report, _) = result.state.model.evaluate(&train)?;
    println!("train mAP50 {:.4}", train_report.map50_or_zero());
    println!("held-out mAP50 {:.4}  ({:.1}s)", report.map50_or_zero(), start.elapsed().as_secs_f64());
    Ok(())
}

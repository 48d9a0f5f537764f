//! Manual template prompts next to learnable context vectors, both encoded
//! by the reference text encoder.
//!
//! cargo run --example domain_prompts

use leapd::alignment::cosine_similarity;
use leapd::config::{DomainClasses, DomainLabel, RunConfig};
use leapd::encoders::{ReferenceTextEncoder, TextEncoder};
use leapd::prompting::{build_manual_prompt, embed_all_prompts, init_prompt_bank};
use leapd::seed::seed_all;
use leapd::tensor::ParamStore;

fn main() -> leapd::Result<()> {
    let cfg = RunConfig::default();
    let domains: Vec<DomainLabel> = ["low,front,day", "medium,bird,night", "high,side,foggy"]
        .iter()
        .map(|d| d.parse())
        .collect::<leapd::Result<_>>()?;
    let classes = DomainClasses::from_observed(domains.iter().copied())?;

    let mut store = ParamStore::new();
    let mut rng = seed_all(cfg.seed).rng("text_encoder");
    let text = ReferenceTextEncoder::new(
        &mut store,
        cfg.vocab_size,
        cfg.token_dim,
        cfg.text_hidden,
        cfg.embed_dim,
        cfg.max_seq_len,
        &mut rng,
    );

    println!("manual prompts:");
    let mut manual = Vec::new();
    for d in classes.labels() {
        let sentence = build_manual_prompt(d);
        let tokens = text.tokenize(&store, &sentence)?;
        println!("  [{:2} tokens] {sentence}", tokens.len());
        manual.push(text.encode_tokens(&store, &tokens)?);
    }

    let bank = init_prompt_bank(cfg.prompt_len, classes.len(), cfg.token_dim, cfg.seed)?;
    let learnable = embed_all_prompts(&bank, &text, &store)?;
    println!(
        "learnable bank: {} classes x {} context vectors x {} dims",
        bank.num_classes(),
        bank.prompt_len(),
        bank.token_dim()
    );

    println!("1 - cosine between class embeddings (manual | learnable):");
    for i in 0..classes.len() {
        let row: Vec<String> = (0..classes.len())
            .map(|j| {
                let m = cosine_similarity(&manual[i].vector, &manual[j].vector).unwrap();
                let l = cosine_similarity(&learnable[i].vector, &learnable[j].vector).unwrap();
                format!("{:.1e}|{:.1e}", 1.0 - m, 1.0 - l)
            })
            .collect();
        println!("  {}", row.join("  "));
    }
    Ok(())
}

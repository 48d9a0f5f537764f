//! The alignment losses on hand-made embeddings: prompt probabilities and
//! cross-entropy, the similarity and dissimilarity scores, and the
//! weighted total.
//!
//! cargo run --example alignment_losses

use leapd::alignment::{
    class_probabilities_raw, domain_invariant_loss, domain_specific_loss, dissimilarity_score,
    prompt_ce_loss, similarity_score, total_loss, LossParts,
};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn main() -> leapd::Result<()> {
    let eps = 1e-7;
    let tau = 0.01;
    let v = unit(&[1.0, 0.2, 0.0]);
    let prompts = [unit(&[0.9, 0.1, 0.3]), unit(&[0.1, 1.0, 0.0]), unit(&[0.0, 0.3, 1.0])];
    let refs: Vec<&[f64]> = prompts.iter().map(Vec::as_slice).collect();

    let probs = class_probabilities_raw(&v, &refs, tau)?;
    let l_lp = prompt_ce_loss(&probs, 0)?;
    println!("p(c|v) = {probs:.4?}  L_lp = {l_lp:.4}");

    for f_prime in [v.clone(), unit(&[0.0, 1.0, 0.0]), v.iter().map(|x| -x).collect()] {
        let s = similarity_score(&v, &f_prime, eps)?;
        let ds: Vec<f64> = refs
            .iter()
            .map(|t| dissimilarity_score(t, &f_prime, eps))
            .collect::<leapd::Result<_>>()?;
        let parts = LossParts {
            l_od: 0.8,
            l_lp,
            l_di: domain_invariant_loss(s, eps)?,
            l_ds: domain_specific_loss(&ds, eps)?,
        };
        let total = total_loss(parts, [1.0, 1.0, 0.5, 0.5])?;
        println!(
            "f' = {:.2?}: s {s:.3}  L_di {:.4}  L_ds {:.4}  L_total {:.4}",
            f_prime, total.l_di, total.l_ds, total.l_total
        );
    }
    Ok(())
}

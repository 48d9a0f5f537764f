//! Domain alignment: cosine similarity, temperature softmax over prompt
//! similarities, the prompt cross-entropy, the feature-map squeeze network
//! and the similarity / dissimilarity losses that pull squeezed detector
//! features toward the image embedding and away from the domain prompts.
//!
//! Every loss here returns its gradient with respect to the embeddings it
//! reads. The trainer seeds those gradients into the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::config::{DissimilarityTarget, RunConfig};
use crate::encoders::{Embedding, EmbeddingKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seed::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Invalid("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let cos = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai / (na * nb) - cos * bi / (nb * nb))
        .collect();
    (da, db)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over `cos(v, t_i) / tau`.
pub fn class_probabilities(v: &Embedding, prompts: &[Embedding], tau: f64) -> Result<Vec<f64>> {
    let prompts: Vec<&[f64]> = prompts.iter().map(|p| p.vector.as_slice()).collect();
    class_probabilities_raw(&v.vector, &prompts, tau)
}

pub fn class_probabilities_raw(v: &[f64], prompts: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Invalid("class probabilities need at least one prompt".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    let logits = prompts
        .iter()
        .map(|t| cosine_similarity(v, t).map(|c| c / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

/// `-ln probs[true_class]`.
pub fn prompt_ce_loss(probs: &[f64], true_class: usize) -> Result<f64> {
    let p = probs.get(true_class).ok_or_else(|| {
        Error::Invalid(format!(
            "true class {true_class} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(0.0 - p.ln())
}

/// `(1 + cos(v, f')) / 2`, clamped to `[eps, 1]`.
pub fn similarity_score(v: &[f64], f_prime: &[f64], eps: f64) -> Result<f64> {
    Ok(((1.0 + cosine_similarity(v, f_prime)?) / 2.0).clamp(eps, 1.0))
}

/// `(1 - cos(t, f')) / 2`, clamped to `[eps, 1]`.
pub fn dissimilarity_score(t: &[f64], f_prime: &[f64], eps: f64) -> Result<f64> {
    Ok(((1.0 - cosine_similarity(t, f_prime)?) / 2.0).clamp(eps, 1.0))
}

fn check_score(name: &str, s: f64, eps: f64) -> Result<()> {
    if !(s >= eps && s <= 1.0) {
        return Err(Error::Invalid(format!(
            "{name} {s} outside [{eps}, 1]; clamp before computing the loss"
        )));
    }
    Ok(())
}

/// `-(1 - s) ln s`
pub fn domain_invariant_loss(s: f64, eps: f64) -> Result<f64> {
    check_score("similarity", s, eps)?;
    Ok((s - 1.0) * s.ln())
}

/// Derivative of `-(1 - s) ln s` with respect to `s`.
pub fn domain_invariant_loss_grad(s: f64) -> f64 {
    s.ln() - (1.0 - s) / s
}

/// Mean over classes of `-(1 - ds_i) ln ds_i`.
pub fn domain_specific_loss(ds: &[f64], eps: f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Invalid("domain-specific loss needs at least one class".into()));
    }
    let mut sum = 0.0;
    for &d in ds {
        check_score("dissimilarity", d, eps)?;
        sum += (d - 1.0) * d.ln();
    }
    Ok(sum / ds.len() as f64)
}

/// The four loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_od: f64,
    pub l_lp: f64,
    pub l_di: f64,
    pub l_ds: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("L_od", self.l_od),
            ("L_lp", self.l_lp),
            ("L_di", self.l_di),
            ("L_ds", self.l_ds),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_od")]
    pub l_od: f64,
    #[serde(rename = "L_lp")]
    pub l_lp: f64,
    #[serde(rename = "L_di")]
    pub l_di: f64,
    #[serde(rename = "L_ds")]
    pub l_ds: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lambdas: [f64; 4],
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            l_od: self.l_od,
            l_lp: self.l_lp,
            l_di: self.l_di,
            l_ds: self.l_ds,
        }
    }
}

/// Weighted sum `l1 L_od + l2 L_lp + l3 L_di + l4 L_ds`.
pub fn total_loss(parts: LossParts, lambdas: [f64; 4]) -> Result<LossBreakdown> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::Invalid(format!("{name} is not finite ({v})")));
        }
        if v < 0.0 {
            return Err(Error::Invalid(format!("{name} is negative ({v})")));
        }
    }
    let l_total = lambdas[0] * parts.l_od
        + lambdas[1] * parts.l_lp
        + lambdas[2] * parts.l_di
        + lambdas[3] * parts.l_ds;
    Ok(LossBreakdown {
        l_od: parts.l_od,
        l_lp: parts.l_lp,
        l_di: parts.l_di,
        l_ds: parts.l_ds,
        l_total,
        lambdas,
    })
}

/// Feature-map squeeze network: global average pool, affine map to the
/// embedding dimension, L2 normalization.
#[derive(Debug, Clone)]
pub struct Fsn {
    in_channels: usize,
    embed_dim: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Fsn {
    pub fn new(store: &mut ParamStore, in_channels: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / in_channels as f64).sqrt();
        let weight = store.add("fsn.weight", Tensor::randn(&[embed_dim, in_channels], std, rng));
        let bias = store.add("fsn.bias", Tensor::zeros(&[embed_dim]));
        Self {
            in_channels,
            embed_dim,
            weight,
            bias,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, feature: NodeId) -> Result<NodeId> {
        let (c, _, _) = g.value(feature).dims3()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "squeeze network expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let pooled = g.global_avg_pool(feature)?;
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let proj = g.linear(pooled, w, b)?;
        g.l2_normalize(proj)
    }

    /// Value-only forward.
    pub fn fsn_forward(&self, store: &ParamStore, feature: &Tensor) -> Result<Embedding> {
        let mut g = Graph::new(store);
        let f = g.constant(feature.clone());
        let out = self.forward(&mut g, f)?;
        Ok(Embedding::new(g.value(out).data().to_vec(), EmbeddingKind::Squeezed))
    }

    /// The pooled channel vector that precedes the affine map.
    pub fn pool(feature: &Tensor) -> Result<Vec<f64>> {
        let (_, h, w) = feature.dims3()?;
        Ok(feature
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect())
    }
}

/// Per-sample alignment losses and their gradients with respect to the
/// image embedding `v`, the squeezed feature `f'` and each prompt
/// embedding `t_i`.
#[derive(Debug, Clone)]
pub struct AlignmentTerms {
    pub l_lp: f64,
    pub l_di: f64,
    pub l_ds: f64,
    pub s: f64,
    pub ds: Vec<f64>,
    pub probs: Vec<f64>,
    pub lp_grad_v: Vec<f64>,
    pub lp_grad_prompts: Vec<Vec<f64>>,
    pub di_grad_v: Vec<f64>,
    pub di_grad_f: Vec<f64>,
    pub ds_grad_f: Vec<f64>,
    pub ds_grad_prompts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentSettings {
    pub temperature: f64,
    pub clamp_eps: f64,
    pub ds_target: DissimilarityTarget,
}

impl From<&RunConfig> for AlignmentSettings {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            temperature: cfg.temperature,
            clamp_eps: cfg.clamp_eps,
            ds_target: cfg.ds_target,
        }
    }
}

impl AlignmentTerms {
    pub fn compute(
        v: &[f64],
        f_prime: &[f64],
        prompts: &[&[f64]],
        true_class: usize,
        settings: AlignmentSettings,
    ) -> Result<Self> {
        let n = prompts.len();
        if true_class >= n {
            return Err(Error::Invalid(format!(
                "true class {true_class} out of range for {n} prompts"
            )));
        }
        let dim = v.len();
        let eps = settings.clamp_eps;
        let tau = settings.temperature;

        // prompt cross-entropy
        let probs = class_probabilities_raw(v, prompts, tau)?;
        let l_lp = prompt_ce_loss(&probs, true_class)?;
        let mut lp_grad_v = vec![0.0; dim];
        let mut lp_grad_prompts = vec![vec![0.0; dim]; n];
        for (i, t) in prompts.iter().enumerate() {
            let dl_dc = (probs[i] - if i == true_class { 1.0 } else { 0.0 }) / tau;
            let (dv, dt) = cosine_grad(v, t);
            for k in 0..dim {
                lp_grad_v[k] += dl_dc * dv[k];
                lp_grad_prompts[i][k] = dl_dc * dt[k];
            }
        }

        // domain-invariant term
        let raw_s = (1.0 + cosine_similarity(v, f_prime)?) / 2.0;
        let s = raw_s.clamp(eps, 1.0);
        let l_di = domain_invariant_loss(s, eps)?;
        let ds_dcos = if raw_s >= eps { 0.5 } else { 0.0 };
        let dl_dcos = domain_invariant_loss_grad(s) * ds_dcos;
        let (dv, df) = cosine_grad(v, f_prime);
        let di_grad_v = dv.iter().map(|x| dl_dcos * x).collect();
        let di_grad_f = df.iter().map(|x| dl_dcos * x).collect();

        // domain-specific term
        let targets: Vec<usize> = match settings.ds_target {
            DissimilarityTarget::AllPrompts => (0..n).collect(),
            DissimilarityTarget::OwnPrompt => vec![true_class],
        };
        let mut ds = Vec::with_capacity(targets.len());
        let mut ds_grad_f = vec![0.0; dim];
        let mut ds_grad_prompts = vec![vec![0.0; dim]; n];
        let count = targets.len() as f64;
        for &i in &targets {
            let raw = (1.0 - cosine_similarity(prompts[i], f_prime)?) / 2.0;
            let d = raw.clamp(eps, 1.0);
            ds.push(d);
            let dd_dcos = if raw >= eps { -0.5 } else { 0.0 };
            let dl_dcos = domain_invariant_loss_grad(d) * dd_dcos / count;
            let (dt, df) = cosine_grad(prompts[i], f_prime);
            for k in 0..dim {
                ds_grad_f[k] += dl_dcos * df[k];
                ds_grad_prompts[i][k] = dl_dcos * dt[k];
            }
        }
        let l_ds = domain_specific_loss(&ds, eps)?;

        Ok(Self {
            l_lp,
            l_di,
            l_ds,
            s,
            ds,
            probs,
            lp_grad_v,
            lp_grad_prompts,
            di_grad_v,
            di_grad_f,
            ds_grad_f,
            ds_grad_prompts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_all;

    const EPS: f64 = 1e-7;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071068).abs() < 1e-7);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        let b = [1.0, 0.5, -0.25];
        assert!(
            (cosine_similarity(&scaled, &b).unwrap() - cosine_similarity(&b, &a).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn probabilities_examples() {
        let v = Embedding::new(vec![1.0, 0.0], EmbeddingKind::Visual);
        let at = |c: f64| Embedding::new(vec![c, (1.0 - c * c).sqrt()], EmbeddingKind::Textual);
        let p = class_probabilities(&v, &[at(0.3), at(0.3), at(0.3)], 0.01).unwrap();
        for pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = class_probabilities(&v, &[at(0.2), at(0.1)], 0.01).unwrap();
        let sigma10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p[0] - sigma10).abs() < 1e-9);
        assert!((p[1] - (1.0 - sigma10)).abs() < 1e-9);
        assert!((p[0] - 0.9999546).abs() < 1e-7);
        assert!(class_probabilities(&v, &[], 0.01).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(prompt_ce_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        let l = prompt_ce_loss(&[0.25; 4], 2).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        assert!((l - 1.3862944).abs() < 1e-7);
        assert!(prompt_ce_loss(&[0.5, 0.5], 2).is_err());
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let p = k as f64 / 10.0;
            let rest = (1.0 - p) / 2.0;
            let l = prompt_ce_loss(&[rest, p, rest], 1).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn similarity_and_dissimilarity_examples() {
        let v = unit(&[1.0, 2.0, -0.5]);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let orth = unit(&[2.0, -1.0, 0.0]);
        assert!((similarity_score(&v, &v, EPS).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity_score(&v, &neg, EPS).unwrap(), EPS);
        assert!((similarity_score(&v, &orth, EPS).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(dissimilarity_score(&v, &v, EPS).unwrap(), EPS);
        assert!((dissimilarity_score(&v, &neg, EPS).unwrap() - 1.0).abs() < 1e-12);
        assert!((dissimilarity_score(&v, &orth, EPS).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn domain_loss_examples() {
        assert_eq!(domain_invariant_loss(1.0, EPS).unwrap(), 0.0);
        let half = 0.5 * 2.0f64.ln();
        assert!((domain_invariant_loss(0.5, EPS).unwrap() - half).abs() < 1e-12);
        assert!((half - 0.3465736).abs() < 1e-7);
        let at_eps = domain_invariant_loss(EPS, EPS).unwrap();
        assert!((at_eps - (1.0 - EPS) * -(EPS.ln())).abs() < 1e-9);
        assert!((at_eps - 16.118).abs() < 1e-3);
        assert!(domain_invariant_loss(0.0, EPS).is_err());
        assert!(domain_invariant_loss(1.5, EPS).is_err());

        assert_eq!(domain_specific_loss(&[1.0, 1.0, 1.0], EPS).unwrap(), 0.0);
        assert!((domain_specific_loss(&[0.5], EPS).unwrap() - half).abs() < 1e-12);
        assert!((domain_specific_loss(&[1.0, 0.5], EPS).unwrap() - half / 2.0).abs() < 1e-12);
        assert!(domain_specific_loss(&[], EPS).is_err());
    }

    #[test]
    fn zero_conditions_hold_in_both_directions() {
        for s in [EPS, 0.1, 0.5, 0.9, 1.0 - 1e-9] {
            assert!(domain_invariant_loss(s, EPS).unwrap() > 0.0, "s={s}");
        }
        assert_eq!(domain_invariant_loss(1.0, EPS).unwrap(), 0.0);
        assert!(domain_specific_loss(&[1.0, 0.999], EPS).unwrap() > 0.0);
        assert_eq!(domain_specific_loss(&[1.0, 1.0], EPS).unwrap(), 0.0);
    }

    #[test]
    fn invariant_loss_derivative_matches_finite_differences() {
        let h = 1e-5;
        for k in 1..=9 {
            let s = k as f64 / 10.0;
            let numeric = (domain_invariant_loss(s + h, EPS).unwrap()
                - domain_invariant_loss(s - h, EPS).unwrap())
                / (2.0 * h);
            let analytic = domain_invariant_loss_grad(s);
            assert!(
                ((numeric - analytic) / analytic).abs() < 1e-6,
                "s={s}: {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn total_loss_examples() {
        let paper = [1.0, 1.0, 0.5, 0.5];
        let ones = LossParts {
            l_od: 1.0,
            l_lp: 1.0,
            l_di: 1.0,
            l_ds: 1.0,
        };
        assert_eq!(total_loss(ones, paper).unwrap().l_total, 3.0);
        assert_eq!(total_loss(LossParts::default(), paper).unwrap().l_total, 0.0);
        let parts = LossParts {
            l_od: 0.3,
            l_lp: 0.2,
            l_di: 0.4,
            l_ds: 0.6,
        };
        assert!((total_loss(parts, paper).unwrap().l_total - 1.0).abs() < 1e-12);
        let bad = LossParts {
            l_di: f64::NAN,
            ..parts
        };
        let err = total_loss(bad, paper).unwrap_err();
        assert!(err.to_string().contains("L_di"), "{err}");
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = [3.0, -1.0, 0.5, 10.0];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 123.456).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fsn_pools_constant_map_and_normalizes() {
        let mut store = ParamStore::new();
        let mut rng = seed_all(1).rng("fsn");
        let fsn = Fsn::new(&mut store, 4, 8, &mut rng);
        let f = Tensor::filled(&[4, 3, 5], 0.7);
        let pooled = Fsn::pool(&f).unwrap();
        for p in pooled {
            assert!((p - 0.7).abs() < 1e-12);
        }
        let e = fsn.fsn_forward(&store, &Tensor::randn(&[4, 3, 5], 1.0, &mut rng)).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-5);
        assert_eq!(e.kind, EmbeddingKind::Squeezed);
        assert!(matches!(
            fsn.fsn_forward(&store, &Tensor::zeros(&[3, 2, 2])),
            Err(Error::Shape(_))
        ));
    }

    fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
        unit(Tensor::randn(&[dim], 1.0, rng).data())
    }

    /// Gradients of every term with respect to v, f' and the prompts match
    /// central differences of the value-level functions.
    #[test]
    fn alignment_gradients_match_finite_differences() {
        let mut rng = seed_all(21).rng("align");
        let settings = AlignmentSettings {
            temperature: 0.1,
            clamp_eps: EPS,
            ds_target: DissimilarityTarget::AllPrompts,
        };
        let dim = 6;
        let v = random_unit(dim, &mut rng);
        let f = random_unit(dim, &mut rng);
        let prompts: Vec<Vec<f64>> = (0..3).map(|_| random_unit(dim, &mut rng)).collect();
        let eval = |v: &[f64], f: &[f64], p: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = p.iter().map(|x| x.as_slice()).collect();
            let t = AlignmentTerms::compute(v, f, &refs, 1, settings).unwrap();
            (t.l_lp, t.l_di, t.l_ds)
        };
        let refs: Vec<&[f64]> = prompts.iter().map(|x| x.as_slice()).collect();
        let terms = AlignmentTerms::compute(&v, &f, &refs, 1, settings).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for k in 0..dim {
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[k] += h;
            vm[k] -= h;
            let (lp_p, di_p, _) = eval(&vp, &f, &prompts);
            let (lp_m, di_m, _) = eval(&vm, &f, &prompts);
            assert!(rel(terms.lp_grad_v[k], (lp_p - lp_m) / (2.0 * h)) < 1e-6);
            assert!(rel(terms.di_grad_v[k], (di_p - di_m) / (2.0 * h)) < 1e-6);

            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp[k] += h;
            fm[k] -= h;
            let (_, di_p, ds_p) = eval(&v, &fp, &prompts);
            let (_, di_m, ds_m) = eval(&v, &fm, &prompts);
            assert!(rel(terms.di_grad_f[k], (di_p - di_m) / (2.0 * h)) < 1e-6);
            assert!(rel(terms.ds_grad_f[k], (ds_p - ds_m) / (2.0 * h)) < 1e-6);

            for i in 0..3 {
                let (mut pp, mut pm) = (prompts.clone(), prompts.clone());
                pp[i][k] += h;
                pm[i][k] -= h;
                let (lp_p, _, ds_p) = eval(&v, &f, &pp);
                let (lp_m, _, ds_m) = eval(&v, &f, &pm);
                assert!(rel(terms.lp_grad_prompts[i][k], (lp_p - lp_m) / (2.0 * h)) < 1e-6);
                assert!(rel(terms.ds_grad_prompts[i][k], (ds_p - ds_m) / (2.0 * h)) < 1e-6);
            }
        }
    }

    #[test]
    fn own_prompt_variant_uses_only_true_class() {
        let mut rng = seed_all(2).rng("own");
        let v = random_unit(5, &mut rng);
        let f = random_unit(5, &mut rng);
        let prompts: Vec<Vec<f64>> = (0..3).map(|_| random_unit(5, &mut rng)).collect();
        let refs: Vec<&[f64]> = prompts.iter().map(|x| x.as_slice()).collect();
        let settings = AlignmentSettings {
            temperature: 0.01,
            clamp_eps: EPS,
            ds_target: DissimilarityTarget::OwnPrompt,
        };
        let t = AlignmentTerms::compute(&v, &f, &refs, 2, settings).unwrap();
        assert_eq!(t.ds.len(), 1);
        let expected = domain_specific_loss(&[dissimilarity_score(&prompts[2], &f, EPS).unwrap()], EPS);
        assert!((t.l_ds - expected.unwrap()).abs() < 1e-12);
        assert!(t.ds_grad_prompts[0].iter().all(|g| *g == 0.0));
    }

    /// One gradient step on each domain loss alone moves the squeezed
    /// feature in the intended direction.
    #[test]
    fn single_steps_move_features_in_the_right_direction() {
        let mut rng = seed_all(8).rng("descent");
        let mut store = ParamStore::new();
        let fsn = Fsn::new(&mut store, 6, 5, &mut rng);
        let feature = Tensor::randn(&[6, 4, 4], 1.0, &mut rng);
        let v = random_unit(5, &mut rng);
        let prompts: Vec<Vec<f64>> = (0..3).map(|_| random_unit(5, &mut rng)).collect();
        let refs: Vec<&[f64]> = prompts.iter().map(|x| x.as_slice()).collect();
        let settings = AlignmentSettings {
            temperature: 0.01,
            clamp_eps: EPS,
            ds_target: DissimilarityTarget::AllPrompts,
        };

        let step = |store: &ParamStore, use_di: bool| -> ParamStore {
            let mut g = Graph::new(store);
            let fnode = g.constant(feature.clone());
            let out = fsn.forward(&mut g, fnode).unwrap();
            let fp = g.value(out).data().to_vec();
            let terms = AlignmentTerms::compute(&v, &fp, &refs, 0, settings).unwrap();
            let seed = if use_di { terms.di_grad_f } else { terms.ds_grad_f };
            let grads = g.backward(vec![(out, Tensor::vector(seed))]).unwrap();
            let mut next = store.clone();
            for id in store.ids() {
                if let Some(gr) = grads.get(id) {
                    for (p, gv) in next.get_mut(id).data_mut().iter_mut().zip(gr.data()) {
                        *p -= 0.05 * gv;
                    }
                }
            }
            next
        };
        let f_of = |s: &ParamStore| fsn.fsn_forward(s, &feature).unwrap().vector;
        let max_prompt_sim = |fp: &[f64]| {
            prompts
                .iter()
                .map(|t| cosine_similarity(t, fp).unwrap())
                .fold(f64::NEG_INFINITY, f64::max)
        };

        let before = f_of(&store);
        let after_di = f_of(&step(&store, true));
        assert!(cosine_similarity(&v, &after_di).unwrap() > cosine_similarity(&v, &before).unwrap());
        let after_ds = f_of(&step(&store, false));
        assert!(max_prompt_sim(&after_ds) < max_prompt_sim(&before));
    }
}

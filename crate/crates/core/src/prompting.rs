//! Manual prompt templates and the learnable prompt bank.
//!
//! Both prompt kinds end up as one textual embedding per shooting-condition
//! class, so the alignment losses never need to know which kind produced
//! them.

use crate::config::{DomainClasses, DomainLabel};
use crate::encoders::{
    Embedding, EmbeddingKind, ReferenceTextEncoder, TextEncoder, TokenSource, TokenStream,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seed::{seed_all, Rng};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Standard deviation of the context vector initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Prompt lengths of the standard ablation.
pub const ABLATION_LENGTHS: [usize; 4] = [4, 8, 16, 32];

/// Fills the shooting-condition template. The article is kept as "An"
/// regardless of the altitude word.
pub fn build_manual_prompt(domain: &DomainLabel) -> String {
    format!(
        "An {} altitude {} view of a {} day taken by a drone",
        domain.altitude, domain.view, domain.weather
    )
}

/// Learnable context vectors, one row of `n` vectors per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    context: Tensor,
}

impl PromptBank {
    pub fn from_tensor(context: Tensor) -> Result<Self> {
        match context.shape() {
            [c, n, d] if *c > 0 && *n > 0 && *d > 0 => Ok(Self { context }),
            other => Err(Error::Shape(format!(
                "prompt bank must be (N_sc, n, d_tok), got {other:?}"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn prompt_len(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.context.shape()[2]
    }

    pub fn context(&self) -> &Tensor {
        &self.context
    }

    pub fn into_tensor(self) -> Tensor {
        self.context
    }

    /// Row `class_index` as a learnable-context token stream.
    pub fn row(&self, class_index: usize) -> Result<TokenStream> {
        if class_index >= self.num_classes() {
            return Err(Error::Invalid(format!(
                "class index {class_index} out of range for {} prompt rows",
                self.num_classes()
            )));
        }
        let (n, d) = (self.prompt_len(), self.token_dim());
        let data = self.context.data()[class_index * n * d..(class_index + 1) * n * d].to_vec();
        Ok(TokenStream {
            vectors: Tensor::from_vec(&[n, d], data)?,
            source: TokenSource::LearnableContext { class_index },
        })
    }
}

pub fn init_prompt_bank_with(
    n: usize,
    num_classes: usize,
    token_dim: usize,
    rng: &mut Rng,
) -> Result<PromptBank> {
    if n == 0 || num_classes == 0 || token_dim == 0 {
        return Err(Error::Invalid(format!(
            "prompt bank sizes must be positive, got n={n}, N_sc={num_classes}, d_tok={token_dim}"
        )));
    }
    PromptBank::from_tensor(Tensor::randn(
        &[num_classes, n, token_dim],
        PROMPT_INIT_STD,
        rng,
    ))
}

/// Draws a bank deterministically from `seed`.
pub fn init_prompt_bank(
    n: usize,
    num_classes: usize,
    token_dim: usize,
    seed: u64,
) -> Result<PromptBank> {
    init_prompt_bank_with(n, num_classes, token_dim, &mut seed_all(seed).rng("prompt_bank"))
}

pub fn embed_class_prompt(
    bank: &PromptBank,
    class_index: usize,
    encoder: &dyn TextEncoder,
    store: &ParamStore,
) -> Result<Embedding> {
    let tokens = bank.row(class_index)?;
    let mut e = encoder.encode_tokens(store, &tokens)?;
    e.kind = EmbeddingKind::Textual;
    Ok(e)
}

/// Embeddings of every row, ordered by class index.
pub fn embed_all_prompts(
    bank: &PromptBank,
    encoder: &dyn TextEncoder,
    store: &ParamStore,
) -> Result<Vec<Embedding>> {
    (0..bank.num_classes())
        .map(|i| embed_class_prompt(bank, i, encoder, store))
        .collect()
}

/// Where the per-class textual embeddings come from during training.
#[derive(Debug, Clone)]
pub enum PromptSource {
    Learnable { bank: ParamId },
    Manual { token_ids: Vec<Vec<usize>> },
}

impl PromptSource {
    pub fn manual(
        classes: &DomainClasses,
        encoder: &ReferenceTextEncoder,
        store: &ParamStore,
    ) -> Result<Self> {
        let token_ids = classes
            .labels()
            .iter()
            .map(|d| encoder.token_ids(store, &build_manual_prompt(d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptSource::Manual { token_ids })
    }

    pub fn num_classes(&self, store: &ParamStore) -> usize {
        match self {
            PromptSource::Learnable { bank } => store.get(*bank).shape()[0],
            PromptSource::Manual { token_ids } => token_ids.len(),
        }
    }

    /// Builds one unit-norm textual embedding node per class.
    ///
    /// `train_prompts` lets gradients reach the bank (learnable) or the
    /// token vocabulary (manual); `train_encoder` lets them reach the text
    /// encoder's own layers.
    pub fn embeddings(
        &self,
        g: &mut Graph<'_>,
        encoder: &ReferenceTextEncoder,
        train_prompts: bool,
        train_encoder: bool,
    ) -> Result<Vec<NodeId>> {
        match self {
            PromptSource::Learnable { bank } => {
                let bank_node = if train_prompts {
                    g.param(*bank)
                } else {
                    g.frozen_param(*bank)
                };
                let rows = g.value(bank_node).shape()[0];
                (0..rows)
                    .map(|i| {
                        let row = g.row(bank_node, i)?;
                        encoder.forward(g, row, train_encoder)
                    })
                    .collect()
            }
            PromptSource::Manual { token_ids } => token_ids
                .iter()
                .map(|ids| {
                    let tokens = encoder.gather_tokens(g, ids, train_prompts)?;
                    encoder.forward(g, tokens, train_encoder)
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Altitude, View, Weather};
    use crate::encoders::token_ids;

    fn encoder() -> (ParamStore, ReferenceTextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = seed_all(3).rng("text");
        let enc = ReferenceTextEncoder::new(&mut store, 128, 32, 32, 16, 64, &mut rng);
        (store, enc)
    }

    #[test]
    fn manual_prompt_fills_template_verbatim() {
        let d = DomainLabel::new(Altitude::High, View::Bird, Weather::Foggy);
        assert_eq!(
            build_manual_prompt(&d),
            "An high altitude bird view of a foggy day taken by a drone"
        );
        assert_eq!(build_manual_prompt(&d), build_manual_prompt(&d));
        let low = build_manual_prompt(&DomainLabel::new(Altitude::Low, View::Front, Weather::Day));
        assert!(low.contains("low altitude") && low.contains("front view"));
    }

    #[test]
    fn filled_template_has_thirteen_tokens() {
        let d = DomainLabel::new(Altitude::High, View::Bird, Weather::Foggy);
        assert_eq!(token_ids(&build_manual_prompt(&d), 512, 64).unwrap().len(), 13);
    }

    #[test]
    fn bank_shape_and_determinism() {
        let a = init_prompt_bank(8, 6, 32, 1).unwrap();
        assert_eq!(a.context().shape(), &[6, 8, 32]);
        assert_eq!(a, init_prompt_bank(8, 6, 32, 1).unwrap());
        assert_ne!(a, init_prompt_bank(8, 6, 32, 2).unwrap());
        assert!(init_prompt_bank(0, 6, 32, 1).is_err());
    }

    #[test]
    fn bank_init_std_is_near_002() {
        let bank = init_prompt_bank(16, 20, 32, 9).unwrap();
        let data = bank.context().data();
        assert!(data.len() >= 10_000);
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (data.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn class_embeddings_are_unit_and_ordered() {
        let (store, enc) = encoder();
        let bank = init_prompt_bank(8, 3, 32, 4).unwrap();
        let all = embed_all_prompts(&bank, &enc, &store).unwrap();
        assert_eq!(all.len(), 3);
        for (i, e) in all.iter().enumerate() {
            assert!((e.norm() - 1.0).abs() < 1e-5);
            assert_eq!(e, &embed_class_prompt(&bank, i, &enc, &store).unwrap());
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let cos: f64 = all[i].vector.iter().zip(&all[j].vector).map(|(a, b)| a * b).sum();
                assert!(cos < 1.0 - 1e-6, "classes {i},{j} cos {cos}");
            }
        }
        assert!(embed_class_prompt(&bank, 3, &enc, &store).is_err());
    }

    #[test]
    fn identical_rows_give_identical_embeddings() {
        let (store, enc) = encoder();
        let bank = init_prompt_bank(4, 1, 32, 4).unwrap();
        let mut doubled = bank.context().data().to_vec();
        doubled.extend_from_slice(bank.context().data());
        let bank = PromptBank::from_tensor(Tensor::from_vec(&[2, 4, 32], doubled).unwrap()).unwrap();
        let all = embed_all_prompts(&bank, &enc, &store).unwrap();
        assert_eq!(all[0].vector, all[1].vector);
    }

    #[test]
    fn graph_embeddings_match_value_path() {
        let (mut store, enc) = encoder();
        let bank = init_prompt_bank(8, 3, 32, 4).unwrap();
        let pid = store.add("prompt_bank", bank.context().clone());
        let source = PromptSource::Learnable { bank: pid };
        let mut g = Graph::new(&store);
        let nodes = source.embeddings(&mut g, &enc, true, false).unwrap();
        let values = embed_all_prompts(&bank, &enc, &store).unwrap();
        for (n, e) in nodes.iter().zip(&values) {
            assert_eq!(g.value(*n).data(), &e.vector[..]);
        }
    }
}

//! Vision and text encoders mapping into a shared unit-norm embedding space.
//!
//! The reference encoders are deliberately small: three strided
//! convolutions, global pooling and a projection for images; a token mean,
//! one tanh hidden layer and a projection for text. Both end in an L2
//! normalization, so cosine similarity between their outputs is a dot
//! product. Any other implementation of [`VisionEncoder`] / [`TextEncoder`]
//! can be dropped in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seed::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingKind {
    Visual,
    Textual,
    Squeezed,
}

/// A point in the shared space. Unit L2 norm when produced by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub kind: EmbeddingKind,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, kind: EmbeddingKind) -> Self {
        Self { vector, kind }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::Shape("cannot normalize a zero embedding".into()));
        }
        Ok(Self {
            vector: self.vector.iter().map(|v| v / n).collect(),
            kind: self.kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenSource {
    TokenizedText { ids: Vec<usize> },
    LearnableContext { class_index: usize },
}

/// A (length, token_dim) sequence of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub vectors: Tensor,
    pub source: TokenSource,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.vectors.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait VisionEncoder: Sync {
    fn embed_dim(&self) -> usize;

    /// Builds the encoder on `graph` for an image node; returns a unit-norm
    /// embedding node. With `trainable == false` no gradient reaches the
    /// encoder's own parameters.
    fn forward(&self, graph: &mut Graph<'_>, image: NodeId, trainable: bool) -> Result<NodeId>;

    fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<Embedding> {
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x, false)?;
        Ok(Embedding::new(g.value(out).data().to_vec(), EmbeddingKind::Visual))
    }
}

pub trait TextEncoder: Sync {
    fn embed_dim(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn max_seq_len(&self) -> usize;

    /// Builds the encoder on `graph` for a (length, token_dim) node.
    fn forward(&self, graph: &mut Graph<'_>, tokens: NodeId, trainable: bool) -> Result<NodeId>;

    fn encode_tokens(&self, store: &ParamStore, tokens: &TokenStream) -> Result<Embedding> {
        let mut g = Graph::new(store);
        let t = g.constant(tokens.vectors.clone());
        let out = self.forward(&mut g, t, false)?;
        Ok(Embedding::new(g.value(out).data().to_vec(), EmbeddingKind::Textual))
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn lecun_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ReferenceVisionEncoder {
    channels: usize,
    embed_dim: usize,
    convs: Vec<Conv>,
    proj_weight: ParamId,
    proj_bias: ParamId,
}

impl ReferenceVisionEncoder {
    pub const WIDTHS: [usize; 3] = [8, 16, 32];

    pub fn new(store: &mut ParamStore, channels: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let mut in_c = channels;
        for (i, &out_c) in Self::WIDTHS.iter().enumerate() {
            let fan_in = in_c * 9;
            let weight = store.add(
                &format!("vision.conv{i}.weight"),
                he_normal(&[out_c, in_c, 3, 3], fan_in, rng),
            );
            let bias = store.add(&format!("vision.conv{i}.bias"), Tensor::zeros(&[out_c]));
            convs.push(Conv { weight, bias });
            in_c = out_c;
        }
        let proj_weight = store.add(
            "vision.proj.weight",
            lecun_normal(&[embed_dim, in_c], in_c, rng),
        );
        let proj_bias = store.add("vision.proj.bias", Tensor::zeros(&[embed_dim]));
        Self {
            channels,
            embed_dim,
            convs,
            proj_weight,
            proj_bias,
        }
    }
}

fn param_node(g: &mut Graph<'_>, id: ParamId, trainable: bool) -> NodeId {
    if trainable {
        g.param(id)
    } else {
        g.frozen_param(id)
    }
}

impl VisionEncoder for ReferenceVisionEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn forward(&self, g: &mut Graph<'_>, image: NodeId, trainable: bool) -> Result<NodeId> {
        let (c, h, w) = g.value(image).dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "vision encoder expects {} channels, got {c}",
                self.channels
            )));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!("image {h}x{w} is smaller than 8x8")));
        }
        let shift = g.constant(Tensor::filled(&[c, h, w], -0.5));
        let shifted = g.add(image, shift)?;
        let mut x = g.scale(shifted, 2.0);
        for conv in &self.convs {
            let wt = param_node(g, conv.weight, trainable);
            let b = param_node(g, conv.bias, trainable);
            let y = g.conv2d(x, wt, b, 2, 1)?;
            x = g.relu(y);
        }
        let pooled = g.global_avg_pool(x)?;
        let wt = param_node(g, self.proj_weight, trainable);
        let b = param_node(g, self.proj_bias, trainable);
        let proj = g.linear(pooled, wt, b)?;
        g.l2_normalize(proj)
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceTextEncoder {
    token_dim: usize,
    hidden: usize,
    embed_dim: usize,
    max_seq_len: usize,
    vocab: ParamId,
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
}

/// Standard deviation of the token vocabulary initialization.
pub const VOCAB_INIT_STD: f64 = 0.02;
/// Standard deviation of the output bias. A non-zero offset gives every
/// prompt a shared starting embedding, as with a pretrained encoder, and
/// keeps small token vectors from being amplified by the final
/// normalization.
pub const TEXT_OUTPUT_OFFSET_STD: f64 = 1.0;

impl ReferenceTextEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        token_dim: usize,
        hidden: usize,
        embed_dim: usize,
        max_seq_len: usize,
        rng: &mut Rng,
    ) -> Self {
        let vocab = store.add(
            "text_vocab",
            Tensor::randn(&[vocab_size, token_dim], VOCAB_INIT_STD, rng),
        );
        let fc1_weight = store.add(
            "text.fc1.weight",
            lecun_normal(&[hidden, token_dim], token_dim, rng),
        );
        let fc1_bias = store.add("text.fc1.bias", Tensor::zeros(&[hidden]));
        let fc2_weight = store.add(
            "text.fc2.weight",
            lecun_normal(&[embed_dim, hidden], hidden, rng),
        );
        let fc2_bias = store.add("text.fc2.bias", Tensor::randn(&[embed_dim], TEXT_OUTPUT_OFFSET_STD, rng));
        Self {
            token_dim,
            hidden,
            embed_dim,
            max_seq_len,
            vocab,
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
        }
    }

    pub fn vocab_param(&self) -> ParamId {
        self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Hashes lowercased whitespace-separated words into vocabulary rows.
    pub fn token_ids(&self, store: &ParamStore, text: &str) -> Result<Vec<usize>> {
        let vocab_size = store.get(self.vocab).shape()[0];
        token_ids(text, vocab_size, self.max_seq_len)
    }

    /// Looks up the token vectors of `text`.
    pub fn tokenize(&self, store: &ParamStore, text: &str) -> Result<TokenStream> {
        let ids = self.token_ids(store, text)?;
        let table = store.get(self.vocab);
        let d = self.token_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        Ok(TokenStream {
            vectors: Tensor::from_vec(&[ids.len(), d], data)?,
            source: TokenSource::TokenizedText { ids },
        })
    }

    /// Token vectors of tokenized text as a graph node; `trainable` lets
    /// gradients reach the vocabulary table.
    pub fn gather_tokens(
        &self,
        g: &mut Graph<'_>,
        ids: &[usize],
        trainable: bool,
    ) -> Result<NodeId> {
        let table = param_node(g, self.vocab, trainable);
        g.gather(table, ids)
    }
}

/// Word-hashing tokenizer shared by the reference text encoder.
pub fn token_ids(text: &str, vocab_size: usize, max_seq_len: usize) -> Result<Vec<usize>> {
    if !text.is_ascii() {
        return Err(Error::Invalid("prompt text must be ASCII".into()));
    }
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| (fnv1a(w.to_ascii_lowercase().as_bytes()) % vocab_size as u64) as usize)
        .collect();
    if ids.is_empty() {
        return Err(Error::Invalid("cannot tokenize empty text".into()));
    }
    if ids.len() > max_seq_len {
        return Err(Error::Invalid(format!(
            "text has {} tokens, more than max_seq_len {max_seq_len}",
            ids.len()
        )));
    }
    Ok(ids)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TextEncoder for ReferenceTextEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn forward(&self, g: &mut Graph<'_>, tokens: NodeId, trainable: bool) -> Result<NodeId> {
        let shape = g.value(tokens).shape().to_vec();
        match shape[..] {
            [0, _] => return Err(Error::Invalid("empty token stream".into())),
            [l, d] if d == self.token_dim => {
                if l > self.max_seq_len {
                    return Err(Error::Invalid(format!(
                        "token stream of length {l} exceeds max_seq_len {}",
                        self.max_seq_len
                    )));
                }
            }
            _ => {
                return Err(Error::Shape(format!(
                    "text encoder expects (L, {}), got {shape:?}",
                    self.token_dim
                )))
            }
        }
        let mean = g.mean_rows(tokens)?;
        let w1 = param_node(g, self.fc1_weight, trainable);
        let b1 = param_node(g, self.fc1_bias, trainable);
        let h = g.linear(mean, w1, b1)?;
        let h = g.tanh(h);
        let w2 = param_node(g, self.fc2_weight, trainable);
        let b2 = param_node(g, self.fc2_bias, trainable);
        let out = g.linear(h, w2, b2)?;
        g.l2_normalize(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_all;

    fn setup() -> (ParamStore, ReferenceVisionEncoder, ReferenceTextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = seed_all(11).rng("encoders");
        let v = ReferenceVisionEncoder::new(&mut store, 3, 16, &mut rng);
        let t = ReferenceTextEncoder::new(&mut store, 64, 8, 12, 16, 16, &mut rng);
        (store, v, t)
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = seed_all(seed).rng("img");
        let mut t = Tensor::uniform(&[3, 16, 16], 0.5, &mut rng);
        for v in t.data_mut() {
            *v += 0.5;
        }
        t
    }

    #[test]
    fn image_embedding_is_unit_norm_and_deterministic() {
        let (store, v, _) = setup();
        let e1 = v.encode_image(&store, &image(1)).unwrap();
        let e2 = v.encode_image(&store, &image(1)).unwrap();
        assert!((e1.norm() - 1.0).abs() < 1e-5);
        assert_eq!(e1, e2);
        assert_eq!(e1.dim(), 16);
        let renorm = e1.normalized().unwrap();
        for (a, b) in e1.vector.iter().zip(&renorm.vector) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn brightness_shift_changes_embedding() {
        let (store, v, _) = setup();
        let img = image(2);
        let mut shifted = img.clone();
        for p in shifted.data_mut() {
            *p = (*p + 0.3).min(1.0);
        }
        let a = v.encode_image(&store, &img).unwrap();
        let b = v.encode_image(&store, &shifted).unwrap();
        let cos: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0 - 1e-6, "cos {cos}");
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let (store, v, _) = setup();
        let img = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(v.encode_image(&store, &img), Err(Error::Shape(_))));
    }

    #[test]
    fn tokenize_reuses_vectors_for_repeated_words() {
        let (store, _, t) = setup();
        let s = t.tokenize(&store, "a b a").unwrap();
        assert_eq!(s.len(), 3);
        let d = 8;
        let rows = s.vectors.data();
        assert_eq!(&rows[0..d], &rows[2 * d..3 * d]);
        assert_eq!(s, t.tokenize(&store, "a b a").unwrap());
        assert_eq!(
            t.tokenize(&store, "A b").unwrap().vectors.data()[..d],
            rows[..d]
        );
    }

    #[test]
    fn empty_text_and_stream_are_errors() {
        let (store, _, t) = setup();
        assert!(t.tokenize(&store, "   ").is_err());
        let empty = TokenStream {
            vectors: Tensor::zeros(&[0, 8]),
            source: TokenSource::LearnableContext { class_index: 0 },
        };
        assert!(t.encode_tokens(&store, &empty).is_err());
    }

    #[test]
    fn text_embedding_is_unit_norm_with_shared_dim() {
        let (store, v, t) = setup();
        let s = t.tokenize(&store, "an aerial view").unwrap();
        let e = t.encode_tokens(&store, &s).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-5);
        assert_eq!(e, t.encode_tokens(&store, &s).unwrap());
        assert_eq!(e.dim(), v.embed_dim());
        assert_eq!(t.embed_dim(), v.embed_dim());
    }

    #[test]
    fn text_gradient_reaches_context_vectors() {
        let (store, _, t) = setup();
        let mut rng = seed_all(5).rng("ctx");
        let ctx = Tensor::randn(&[4, 8], 0.5, &mut rng);
        let weights = Tensor::randn(&[16], 1.0, &mut rng);
        let f = |c: &Tensor| {
            let s = TokenStream {
                vectors: c.clone(),
                source: TokenSource::LearnableContext { class_index: 0 },
            };
            let e = t.encode_tokens(&store, &s).unwrap();
            e.vector.iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut store2 = store.clone();
        let pid = store2.add("prompt_bank", ctx.clone());
        let mut g = Graph::new(&store2);
        let c = g.param(pid);
        let out = t.forward(&mut g, c, false).unwrap();
        let grads = g.backward(vec![(out, weights.clone())]).unwrap();
        let analytic = grads.get(pid).unwrap();
        let h = 1e-5;
        for j in 0..ctx.len() {
            let mut p = ctx.clone();
            p.data_mut()[j] += h;
            let mut m = ctx.clone();
            m.data_mut()[j] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {j}: {numeric} vs {a}");
        }
    }
}

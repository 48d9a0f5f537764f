//! Shared domain types and the run configuration.
//!
//! Config files are UTF-8 text with one `key = value` per line and `#`
//! comments. Overrides (`--set key=value` on the command line) win over the
//! file, and the file wins over the built-in defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

macro_rules! vocab_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::Invalid(format!(
                        "unknown {} word `{}`",
                        stringify!($name).to_ascii_lowercase(),
                        other
                    ))),
                }
            }
        }
    };
}

vocab_enum!(
    /// Flight altitude of the drone.
    Altitude { Low => "low", Medium => "medium", High => "high" }
);
vocab_enum!(
    /// Camera view angle.
    View { Front => "front", Side => "side", Bird => "bird" }
);
vocab_enum!(
    /// Weather / illumination condition.
    Weather { Day => "day", Night => "night", Foggy => "foggy" }
);

/// A shooting condition: the (altitude, view, weather) triple of one image.
///
/// The integer class index is not stored here; it is assigned by
/// [`DomainClasses`] from the triples observed in a training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub altitude: Altitude,
    pub view: View,
    pub weather: Weather,
}

impl DomainLabel {
    pub fn new(altitude: Altitude, view: View, weather: Weather) -> Self {
        Self {
            altitude,
            view,
            weather,
        }
    }

    /// Number of distinct triples the vocabulary can express.
    pub const VOCABULARY_SIZE: usize = 27;
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.altitude, self.view, self.weather)
    }
}

impl FromStr for DomainLabel {
    type Err = Error;

    /// Parses `altitude,view,weather`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Invalid(format!(
                "domain must be `altitude,view,weather`, got `{s}`"
            )));
        }
        Ok(Self::new(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?))
    }
}

/// Bijective map between observed domain triples and class indices
/// `0..N_sc`. Indices follow the sorted order of the triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainClasses {
    labels: Vec<DomainLabel>,
}

impl DomainClasses {
    pub fn from_observed<I: IntoIterator<Item = DomainLabel>>(observed: I) -> Result<Self> {
        let mut labels: Vec<DomainLabel> = observed.into_iter().collect();
        labels.sort();
        labels.dedup();
        if labels.is_empty() {
            return Err(Error::Dataset("no domain labels observed".into()));
        }
        Ok(Self { labels })
    }

    /// Extends the observed classes to `count` rows. Padding rows reuse no
    /// triple; they are placeholders that never match a sample.
    pub fn with_override(self, count: usize) -> Result<Self> {
        if count == 0 || count == self.labels.len() {
            return Ok(self);
        }
        if count < self.labels.len() {
            return Err(Error::invalid_value(
                "num_domain_classes",
                format!(
                    "{} observed shooting conditions exceed the configured {count}",
                    self.labels.len()
                ),
            ));
        }
        if count > DomainLabel::VOCABULARY_SIZE {
            return Err(Error::invalid_value(
                "num_domain_classes",
                format!("must be at most {}", DomainLabel::VOCABULARY_SIZE),
            ));
        }
        let mut labels = self.labels;
        for &a in Altitude::ALL {
            for &v in View::ALL {
                for &w in Weather::ALL {
                    if labels.len() == count {
                        break;
                    }
                    let label = DomainLabel::new(a, v, w);
                    if !labels.contains(&label) {
                        labels.push(label);
                    }
                }
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &DomainLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> Option<DomainLabel> {
        self.labels.get(index).copied()
    }

    pub fn labels(&self) -> &[DomainLabel] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    Manual,
    Learnable,
    DetectorOnly,
}

impl PromptMode {
    fn word(self) -> &'static str {
        match self {
            PromptMode::Manual => "manual",
            PromptMode::Learnable => "learnable",
            PromptMode::DetectorOnly => "detector_only",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(PromptMode::Manual),
            "learnable" => Ok(PromptMode::Learnable),
            "detector_only" => Ok(PromptMode::DetectorOnly),
            other => Err(Error::invalid_value(
                "prompt_mode",
                format!("expected manual, learnable or detector_only, got `{other}`"),
            )),
        }
    }
}

/// How the `weight_decay` coefficient is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayMode {
    /// L2 penalty added to the gradient of decayed parameters.
    WeightDecay,
    /// Time-based learning-rate decay `lr / (1 + decay * step)`.
    LrDecay,
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayMode::WeightDecay => "weight_decay",
            DecayMode::LrDecay => "lr_decay",
        })
    }
}

impl FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight_decay" => Ok(DecayMode::WeightDecay),
            "lr_decay" => Ok(DecayMode::LrDecay),
            other => Err(Error::invalid_value(
                "decay_mode",
                format!("expected weight_decay or lr_decay, got `{other}`"),
            )),
        }
    }
}

/// Which pyramid feature feeds the squeeze network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentLevel {
    /// Coarsest level.
    Top,
    /// A specific level, finest first.
    Level(usize),
    /// Mean of all levels after pooling to the coarsest grid.
    Mean,
}

impl fmt::Display for AlignmentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentLevel::Top => f.write_str("top"),
            AlignmentLevel::Level(i) => write!(f, "{i}"),
            AlignmentLevel::Mean => f.write_str("mean"),
        }
    }
}

impl FromStr for AlignmentLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(AlignmentLevel::Top),
            "mean" => Ok(AlignmentLevel::Mean),
            other => other.parse::<usize>().map(AlignmentLevel::Level).map_err(|_| {
                Error::invalid_value(
                    "alignment_level",
                    format!("expected top, mean or a level index, got `{other}`"),
                )
            }),
        }
    }
}

/// Which prompt embeddings the dissimilarity term compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DissimilarityTarget {
    AllPrompts,
    OwnPrompt,
}

impl fmt::Display for DissimilarityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DissimilarityTarget::AllPrompts => "all",
            DissimilarityTarget::OwnPrompt => "own",
        })
    }
}

impl FromStr for DissimilarityTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DissimilarityTarget::AllPrompts),
            "own" => Ok(DissimilarityTarget::OwnPrompt),
            other => Err(Error::invalid_value(
                "ds_target",
                format!("expected all or own, got `{other}`"),
            )),
        }
    }
}

/// Every knob of a run. Defaults follow the published optimizer and loss
/// settings; the remaining sizes are desk-scale choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    pub lambdas: [f64; 4],
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clamp_eps: f64,
    pub prompt_mode: PromptMode,

    pub token_dim: usize,
    pub text_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub freeze_text_encoder: bool,
    pub freeze_vision_encoder: bool,
    pub num_domain_classes: usize,
    pub ds_target: DissimilarityTarget,
    pub two_step_prompt_epochs: usize,

    pub image_size: usize,
    pub channels: usize,
    pub fpn_channels: usize,
    pub strides: Vec<usize>,
    pub anchor_scale: f64,
    pub anchor_ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub alignment_level: AlignmentLevel,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub fallback_domain: DomainLabel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            prompt_len: 8,
            temperature: 0.01,
            lambdas: [1.0, 1.0, 0.5, 0.5],
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            decay_mode: DecayMode::WeightDecay,
            epochs: 12,
            batch_size: 16,
            seed: 0,
            clamp_eps: 1e-7,
            prompt_mode: PromptMode::Learnable,

            token_dim: 32,
            text_hidden: 64,
            vocab_size: 512,
            max_seq_len: 64,
            freeze_text_encoder: true,
            freeze_vision_encoder: true,
            num_domain_classes: 0,
            ds_target: DissimilarityTarget::AllPrompts,
            two_step_prompt_epochs: 4,

            image_size: 64,
            channels: 3,
            fpn_channels: 32,
            strides: vec![4, 8, 16],
            anchor_scale: 2.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.5,
            neg_iou: 0.4,
            alignment_level: AlignmentLevel::Top,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            fallback_domain: DomainLabel::new(Altitude::Medium, View::Front, Weather::Day),
        }
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::invalid_value(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid_value(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    /// Every recognised key, in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "embed_dim",
        "prompt_len",
        "temperature",
        "lambda1",
        "lambda2",
        "lambda3",
        "lambda4",
        "lr",
        "momentum",
        "weight_decay",
        "decay_mode",
        "epochs",
        "batch_size",
        "seed",
        "clamp_eps",
        "prompt_mode",
        "token_dim",
        "text_hidden",
        "vocab_size",
        "max_seq_len",
        "freeze_text_encoder",
        "freeze_vision_encoder",
        "num_domain_classes",
        "ds_target",
        "two_step_prompt_epochs",
        "image_size",
        "channels",
        "fpn_channels",
        "strides",
        "anchor_scale",
        "anchor_ratios",
        "pos_iou",
        "neg_iou",
        "alignment_level",
        "score_threshold",
        "nms_iou",
        "max_detections",
        "fallback_domain",
    ];

    /// Sets one key from its textual value. Range checks run in
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "prompt_len" => self.prompt_len = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "lambda1" => self.lambdas[0] = parse_num(key, value)?,
            "lambda2" => self.lambdas[1] = parse_num(key, value)?,
            "lambda3" => self.lambdas[2] = parse_num(key, value)?,
            "lambda4" => self.lambdas[3] = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "decay_mode" => self.decay_mode = value.parse()?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "clamp_eps" => self.clamp_eps = parse_num(key, value)?,
            "prompt_mode" => self.prompt_mode = value.parse()?,
            "token_dim" => self.token_dim = parse_num(key, value)?,
            "text_hidden" => self.text_hidden = parse_num(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, value)?,
            "freeze_text_encoder" => self.freeze_text_encoder = parse_bool(key, value)?,
            "freeze_vision_encoder" => self.freeze_vision_encoder = parse_bool(key, value)?,
            "num_domain_classes" => self.num_domain_classes = parse_num(key, value)?,
            "ds_target" => self.ds_target = value.parse()?,
            "two_step_prompt_epochs" => self.two_step_prompt_epochs = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "fpn_channels" => self.fpn_channels = parse_num(key, value)?,
            "strides" => self.strides = parse_list(key, value)?,
            "anchor_scale" => self.anchor_scale = parse_num(key, value)?,
            "anchor_ratios" => self.anchor_ratios = parse_list(key, value)?,
            "pos_iou" => self.pos_iou = parse_num(key, value)?,
            "neg_iou" => self.neg_iou = parse_num(key, value)?,
            "alignment_level" => self.alignment_level = value.parse()?,
            "score_threshold" => self.score_threshold = parse_num(key, value)?,
            "nms_iou" => self.nms_iou = parse_num(key, value)?,
            "max_detections" => self.max_detections = parse_num(key, value)?,
            "fallback_domain" => self.fallback_domain = value.parse()?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "embed_dim" => self.embed_dim.to_string(),
            "prompt_len" => self.prompt_len.to_string(),
            "temperature" => self.temperature.to_string(),
            "lambda1" => self.lambdas[0].to_string(),
            "lambda2" => self.lambdas[1].to_string(),
            "lambda3" => self.lambdas[2].to_string(),
            "lambda4" => self.lambdas[3].to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "decay_mode" => self.decay_mode.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "clamp_eps" => self.clamp_eps.to_string(),
            "prompt_mode" => self.prompt_mode.to_string(),
            "token_dim" => self.token_dim.to_string(),
            "text_hidden" => self.text_hidden.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "freeze_text_encoder" => self.freeze_text_encoder.to_string(),
            "freeze_vision_encoder" => self.freeze_vision_encoder.to_string(),
            "num_domain_classes" => self.num_domain_classes.to_string(),
            "ds_target" => self.ds_target.to_string(),
            "two_step_prompt_epochs" => self.two_step_prompt_epochs.to_string(),
            "image_size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            "fpn_channels" => self.fpn_channels.to_string(),
            "strides" => join(&self.strides),
            "anchor_scale" => self.anchor_scale.to_string(),
            "anchor_ratios" => join(&self.anchor_ratios),
            "pos_iou" => self.pos_iou.to_string(),
            "neg_iou" => self.neg_iou.to_string(),
            "alignment_level" => self.alignment_level.to_string(),
            "score_threshold" => self.score_threshold.to_string(),
            "nms_iou" => self.nms_iou.to_string(),
            "max_detections" => self.max_detections.to_string(),
            "fallback_domain" => self.fallback_domain.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::invalid_value(key, "must be at least 1"));
            }
            Ok(())
        }

        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid_value("temperature", "temperature must be positive"));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 0.01) {
            return Err(Error::invalid_value("clamp_eps", "clamp_eps must lie in (0, 0.01]"));
        }
        for (i, l) in self.lambdas.iter().enumerate() {
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid_value(
                    &format!("lambda{}", i + 1),
                    "weight must be non-negative and finite",
                ));
            }
        }
        if !(1..=64).contains(&self.prompt_len) {
            return Err(Error::invalid_value("prompt_len", "prompt_len must lie in [1, 64]"));
        }
        if self.prompt_len > self.max_seq_len {
            return Err(Error::invalid_value(
                "prompt_len",
                format!("prompt_len exceeds max_seq_len {}", self.max_seq_len),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid_value("lr", "lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_value("momentum", "momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid_value("weight_decay", "weight_decay must be non-negative"));
        }
        positive("embed_dim", self.embed_dim)?;
        positive("batch_size", self.batch_size)?;
        positive("token_dim", self.token_dim)?;
        positive("text_hidden", self.text_hidden)?;
        positive("vocab_size", self.vocab_size)?;
        positive("max_seq_len", self.max_seq_len)?;
        positive("channels", self.channels)?;
        positive("fpn_channels", self.fpn_channels)?;
        positive("max_detections", self.max_detections)?;
        if self.image_size < 64 {
            return Err(Error::invalid_value("image_size", "image_size must be at least 64"));
        }
        if self.strides.len() < 2 {
            return Err(Error::invalid_value("strides", "need at least two pyramid levels"));
        }
        for w in self.strides.windows(2) {
            if w[1] != w[0] * 2 {
                return Err(Error::invalid_value(
                    "strides",
                    "strides must double from level to level",
                ));
            }
        }
        if !self.strides[0].is_power_of_two() || self.strides[0] < 2 {
            return Err(Error::invalid_value("strides", "finest stride must be a power of two >= 2"));
        }
        if *self.strides.last().unwrap() > self.image_size {
            return Err(Error::invalid_value("strides", "largest stride exceeds image_size"));
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid_value("anchor_ratios", "ratios must be positive"));
        }
        if !(self.anchor_scale > 0.0) {
            return Err(Error::invalid_value("anchor_scale", "anchor_scale must be positive"));
        }
        if !(0.0 < self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::invalid_value(
                "pos_iou",
                "require 0 < neg_iou <= pos_iou <= 1",
            ));
        }
        if let AlignmentLevel::Level(i) = self.alignment_level {
            if i >= self.strides.len() {
                return Err(Error::invalid_value(
                    "alignment_level",
                    format!("level {i} out of range for {} levels", self.strides.len()),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid_value("nms_iou", "nms_iou must lie in [0, 1]"));
        }
        if self.num_domain_classes > DomainLabel::VOCABULARY_SIZE {
            return Err(Error::invalid_value(
                "num_domain_classes",
                format!("must be at most {}", DomainLabel::VOCABULARY_SIZE),
            ));
        }
        Ok(())
    }

    /// Parses config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key, one per line, in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the serialized config, hex encoded.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Returns a copy with only `key` changed.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.set(key, value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys whose values differ between the two configs.
    pub fn diff_keys(&self, other: &RunConfig) -> Vec<&'static str> {
        Self::KEYS
            .iter()
            .copied()
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }
}

/// Loads a config file and applies overrides on top of it.
pub fn load_config(path: &Path, overrides: &BTreeMap<String, String>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text)?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `key=value` override strings.
pub fn parse_overrides<S: AsRef<str>>(items: &[S]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for item in items {
        let item = item.as_ref();
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override `{item}` is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_published_defaults() {
        let f = write_tmp("");
        let cfg = load_config(f.path(), &BTreeMap::new()).unwrap();
        assert_eq!(cfg.prompt_len, 8);
        assert_eq!(cfg.lambdas, [1.0, 1.0, 0.5, 0.5]);
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 0.0001);
        assert_eq!(cfg.temperature, 0.01);
        assert_eq!(cfg.clamp_eps, 1e-7);
        assert_eq!(cfg.embed_dim, 64);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn overrides_win_over_file() {
        let f = write_tmp("prompt_len = 4 # from file\n");
        let cfg = load_config(f.path(), &BTreeMap::new()).unwrap();
        assert_eq!(cfg.prompt_len, 4);
        let ov = parse_overrides(&["prompt_len=16"]).unwrap();
        let cfg = load_config(f.path(), &ov).unwrap();
        assert_eq!(cfg.prompt_len, 16);
    }

    #[test]
    fn negative_temperature_is_rejected() {
        let f = write_tmp("temperature = -1\n");
        let err = load_config(f.path(), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("temperature must be positive"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write_tmp("bogus_key = 3\n");
        let err = load_config(f.path(), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn clamp_eps_bound() {
        assert!(RunConfig::from_text("clamp_eps = 0.02").is_err());
        assert!(RunConfig::from_text("clamp_eps = 0").is_err());
        assert!(RunConfig::from_text("clamp_eps = 0.01").is_ok());
    }

    #[test]
    fn domain_classes_are_bijective_and_sorted() {
        let a = DomainLabel::new(Altitude::High, View::Bird, Weather::Day);
        let b = DomainLabel::new(Altitude::Low, View::Front, Weather::Day);
        let classes = DomainClasses::from_observed([a, b, a, b, a]).unwrap();
        assert_eq!(classes.len(), 2);
        assert_eq!(classes.index_of(&b), Some(0));
        assert_eq!(classes.index_of(&a), Some(1));
        assert_eq!(classes.label(1), Some(a));
        let padded = classes.with_override(4).unwrap();
        assert_eq!(padded.len(), 4);
        assert_eq!(padded.index_of(&a), Some(1));
    }

    #[test]
    fn domain_label_parses() {
        let d: DomainLabel = "high, bird, foggy".parse().unwrap();
        assert_eq!(d, DomainLabel::new(Altitude::High, View::Bird, Weather::Foggy));
        assert!("high,bird,sunny".parse::<DomainLabel>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn config_text_round_trips(
            n in 1usize..=64,
            tau in 1e-4f64..10.0,
            l in proptest::array::uniform4(0.0f64..5.0),
            lr in 1e-5f64..1.0,
            seed in proptest::num::u64::ANY,
            mode in 0usize..3,
            level in 0usize..4,
        ) {
            let mut cfg = RunConfig {
                prompt_len: n,
                temperature: tau,
                lambdas: l,
                lr,
                seed,
                ..RunConfig::default()
            };
            cfg.prompt_mode = [PromptMode::Manual, PromptMode::Learnable, PromptMode::DetectorOnly][mode];
            cfg.alignment_level = match level {
                0 => AlignmentLevel::Top,
                1 => AlignmentLevel::Mean,
                i => AlignmentLevel::Level(i - 2),
            };
            let parsed = RunConfig::from_text(&cfg.to_text()).unwrap();
            proptest::prop_assert_eq!(parsed, cfg);
        }
    }
}

//! One-step joint training of detector, squeeze network and prompts, plus
//! checkpoints and stripping for detector-only inference.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{total_loss, AlignmentSettings, AlignmentTerms, Fsn, LossBreakdown, LossParts};
use crate::config::{DecayMode, DomainClasses, PromptMode, RunConfig};
use crate::datasets::DatasetIndex;
use crate::detector::{select_alignment_feature, Detection, Detector, DetectorSpec};
use crate::encoders::{Embedding, EmbeddingKind, ReferenceTextEncoder, ReferenceVisionEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{map_metrics, EvalReport, ImageEval};
use crate::graph::{Graph, NodeId};
use crate::prompting::{init_prompt_bank_with, PromptSource};
use crate::sample::{CategorySet, ImageSample};
use crate::seed::seed_all;
use crate::tensor::{Gradients, ParamEntry, ParamGroup, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LEAPDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Encoders, squeeze network and prompts: everything besides the detector.
#[derive(Debug, Clone)]
pub struct DomainModules {
    pub vision: ReferenceVisionEncoder,
    pub text: ReferenceTextEncoder,
    pub fsn: Fsn,
    pub prompts: PromptSource,
    pub classes: DomainClasses,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub categories: CategorySet,
    pub store: ParamStore,
    pub detector: Detector,
    pub domain: Option<DomainModules>,
}

impl Model {
    /// Builds a freshly initialised model. Each component draws from its own
    /// seed stream, so the detector initialisation does not depend on the
    /// prompt mode.
    pub fn new(cfg: &RunConfig, categories: CategorySet, classes: Option<DomainClasses>) -> Result<Self> {
        cfg.validate()?;
        let ctx = seed_all(cfg.seed);
        let mut store = ParamStore::new();
        let detector = Detector::new(
            &mut store,
            DetectorSpec::from_config(cfg, &categories),
            &mut ctx.rng("detector"),
        )?;
        let domain = match (cfg.prompt_mode, classes) {
            (PromptMode::DetectorOnly, _) | (_, None) => None,
            (mode, Some(classes)) => {
                let vision = ReferenceVisionEncoder::new(
                    &mut store,
                    cfg.channels,
                    cfg.embed_dim,
                    &mut ctx.rng("vision_encoder"),
                );
                let text = ReferenceTextEncoder::new(
                    &mut store,
                    cfg.vocab_size,
                    cfg.token_dim,
                    cfg.text_hidden,
                    cfg.embed_dim,
                    cfg.max_seq_len,
                    &mut ctx.rng("text_encoder"),
                );
                let fsn = Fsn::new(&mut store, cfg.fpn_channels, cfg.embed_dim, &mut ctx.rng("fsn"));
                let prompts = match mode {
                    PromptMode::Learnable => {
                        let bank = init_prompt_bank_with(
                            cfg.prompt_len,
                            classes.len(),
                            cfg.token_dim,
                            &mut ctx.rng("prompt_bank"),
                        )?;
                        PromptSource::Learnable {
                            bank: store.add("prompt_bank", bank.into_tensor()),
                        }
                    }
                    _ => PromptSource::manual(&classes, &text, &store)?,
                };
                Some(DomainModules {
                    vision,
                    text,
                    fsn,
                    prompts,
                    classes,
                })
            }
        };
        Ok(Self {
            config: cfg.clone(),
            categories,
            store,
            detector,
            domain,
        })
    }

    pub fn has_domain_modules(&self) -> bool {
        self.domain.is_some()
    }

    /// A copy holding only the detector.
    pub fn stripped(&self) -> Self {
        Self {
            config: self.config.clone(),
            categories: self.categories.clone(),
            store: self.store.filtered(|e| e.group == ParamGroup::Detector),
            detector: self.detector.clone(),
            domain: None,
        }
    }

    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        self.detector.detect(
            &self.store,
            image,
            self.config.score_threshold,
            self.config.nms_iou,
            self.config.max_detections,
        )
    }

    /// Detects on every sample in parallel; output follows input order.
    pub fn predict(&self, samples: &[ImageSample]) -> Result<Vec<ImageEval>> {
        samples
            .par_iter()
            .map(|s| Ok(ImageEval::new(s, self.detect(&s.image)?)))
            .collect()
    }

    pub fn evaluate(&self, samples: &[ImageSample]) -> Result<(EvalReport, Vec<ImageEval>)> {
        let images = self.predict(samples)?;
        Ok((map_metrics(&images, &self.categories), images))
    }

    /// Unit-norm textual embedding of every domain class.
    pub fn prompt_embeddings(&self) -> Result<Vec<Embedding>> {
        let dm = self.domain.as_ref().ok_or(Error::DomainModulesAbsent)?;
        let mut g = Graph::new(&self.store);
        let nodes = dm.prompts.embeddings(&mut g, &dm.text, false, false)?;
        Ok(nodes
            .iter()
            .map(|&n| Embedding::new(g.value(n).data().to_vec(), EmbeddingKind::Textual))
            .collect())
    }

    /// Scalar count of detector parameters.
    pub fn detector_param_count(&self) -> usize {
        self.store.count(ParamGroup::Detector)
    }

    pub fn save(&self, path: &Path, progress: Progress) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config: self.config.to_text(),
            categories: self.categories.clone(),
            domain_classes: self.domain.as_ref().map(|d| d.classes.clone()),
            stripped: self.domain.is_none() && self.config.prompt_mode != PromptMode::DetectorOnly,
            epoch: progress.epoch,
            step: progress.step,
        };
        write_checkpoint(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<(Self, Progress)> {
        let (meta, store) = read_checkpoint(path)?;
        let cfg = RunConfig::from_text(&meta.config)?;
        let classes = if meta.stripped { None } else { meta.domain_classes };
        let mut model = Model::new(&cfg, meta.categories, classes)?;
        model.store.load_from(&store)?;
        Ok((
            model,
            Progress {
                epoch: meta.epoch,
                step: meta.step,
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: String,
    pub categories: CategorySet,
    pub domain_classes: Option<DomainClasses>,
    pub stripped: bool,
    pub epoch: usize,
    pub step: u64,
}

/// Layout: magic, version (u32), metadata length (u64), JSON metadata,
/// entry count (u64), then per entry: name length (u32), name, rank (u32),
/// dims (u64 each), values (f64). All integers and floats little-endian.
pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let meta_json = serde_json::to_vec(meta)?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io)?;
    for e in store.entries() {
        w.write_all(&(e.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(e.name.as_bytes()).map_err(io)?;
        let shape = e.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in e.tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let meta_len = read_u64(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(|_| bad("truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
    let count = read_u64(&mut r).ok_or_else(|| bad("truncated entry table"))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r).ok_or_else(|| bad("truncated entry"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated entry"))?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let group = ParamGroup::from_name(&name).ok_or_else(|| bad(&format!("unknown entry `{name}`")))?;
        let rank = read_u32(&mut r).ok_or_else(|| bad("truncated entry"))? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated entry"))?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw).map_err(|_| bad(&format!("truncated values of `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.push_entry(ParamEntry {
            name,
            group,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }
    Ok((meta, store))
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok().map(|_| u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok().map(|_| u64::from_le_bytes(b))
}

/// Writes a copy of `input` without any non-detector entry.
pub fn strip_domain_modules(input: &Path, output: &Path) -> Result<()> {
    let (mut meta, store) = read_checkpoint(input)?;
    if !store.has_group(ParamGroup::Detector) {
        return Err(Error::Checkpoint(format!(
            "{}: no detector parameters",
            input.display()
        )));
    }
    let cfg = RunConfig::from_text(&meta.config)?;
    // every detector parameter the architecture expects must be present
    let reference = Model::new(&cfg.with("prompt_mode", "detector_only")?, meta.categories.clone(), None)?;
    for e in reference.store.entries() {
        if store.by_name(&e.name).is_none() {
            return Err(Error::Checkpoint(format!("missing detector entry `{}`", e.name)));
        }
    }
    meta.stripped = cfg.prompt_mode != PromptMode::DetectorOnly;
    let kept = store.filtered(|e| e.group == ParamGroup::Detector);
    write_checkpoint(output, &meta, &kept)
}

/// What one step optimises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub lambdas: [f64; 4],
    /// Detector and squeeze network (and an unfrozen vision encoder).
    pub train_detector: bool,
    /// Prompt bank or token vocabulary (and an unfrozen text encoder).
    pub train_prompts: bool,
}

impl StepPlan {
    pub fn joint(cfg: &RunConfig) -> Self {
        Self {
            lambdas: cfg.lambdas,
            train_detector: true,
            train_prompts: true,
        }
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers, one per parameter, shaped like it.
    pub velocity: Vec<Tensor>,
    pub progress: Progress,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model
            .store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Self {
            model,
            velocity,
            progress: Progress::default(),
        }
    }
}

/// One SGD-with-momentum update: `v <- mu v - lr (g + wd theta)`,
/// `theta <- theta + v`.
pub fn sgd_momentum_update(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64, wd: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v - lr * (g + wd * *t);
        *t += *v;
    }
}

fn group_trainable(group: ParamGroup, cfg: &RunConfig, plan: &StepPlan) -> bool {
    match group {
        ParamGroup::Detector | ParamGroup::Fsn => plan.train_detector,
        ParamGroup::VisionEncoder => plan.train_detector && !cfg.freeze_vision_encoder,
        ParamGroup::PromptBank => plan.train_prompts && cfg.prompt_mode == PromptMode::Learnable,
        ParamGroup::TextVocab => plan.train_prompts && cfg.prompt_mode == PromptMode::Manual,
        ParamGroup::TextEncoder => plan.train_prompts && !cfg.freeze_text_encoder,
    }
}

fn group_decayed(group: ParamGroup) -> bool {
    !matches!(group, ParamGroup::PromptBank | ParamGroup::TextVocab)
}

fn seed_vec(g: &Graph<'_>, node: NodeId, values: Vec<f64>) -> Result<(NodeId, Tensor)> {
    let shape = g.value(node).shape().to_vec();
    Ok((node, Tensor::from_vec(&shape, values)?))
}

/// Losses and gradients of one sample, already scaled by `weight`.
fn sample_pass(model: &Model, sample: &ImageSample, plan: &StepPlan, weight: f64) -> Result<(LossParts, Gradients)> {
    let cfg = &model.config;
    let [l1, l2, l3, l4] = plan.lambdas;
    let mut g = Graph::new(&model.store);
    let x = g.constant(sample.image.clone());
    let pyramid = model.detector.pyramid(&mut g, x)?;
    let head = model.detector.head(&mut g, &pyramid)?;
    let (det_loss, det_seeds) = model.detector.loss(&g, &head, &sample.boxes)?;
    let mut parts = LossParts {
        l_od: det_loss.value,
        ..LossParts::default()
    };
    let mut seeds = Vec::new();
    if l1 != 0.0 {
        seeds.extend(det_seeds.into_iter().map(|(n, t)| (n, t.scaled(l1 * weight))));
    }

    if let Some(dm) = &model.domain {
        let v = dm.vision.forward(&mut g, x, plan.train_detector && !cfg.freeze_vision_encoder)?;
        let feature = select_alignment_feature(&mut g, &pyramid, cfg.alignment_level)?;
        let f = dm.fsn.forward(&mut g, feature)?;
        let prompts = dm.prompts.embeddings(
            &mut g,
            &dm.text,
            plan.train_prompts,
            plan.train_prompts && !cfg.freeze_text_encoder,
        )?;
        let class = dm.classes.index_of(&sample.domain).ok_or_else(|| {
            Error::Dataset(format!(
                "{}: domain {} is not one of the training domain classes",
                sample.id, sample.domain
            ))
        })?;
        let prompt_values: Vec<&[f64]> = prompts.iter().map(|&p| g.value(p).data()).collect();
        let terms = AlignmentTerms::compute(
            g.value(v).data(),
            g.value(f).data(),
            &prompt_values,
            class,
            AlignmentSettings::from(cfg),
        )?;
        parts.l_lp = terms.l_lp;
        parts.l_di = terms.l_di;
        parts.l_ds = terms.l_ds;

        let combine = |a: &[f64], wa: f64, b: &[f64], wb: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| weight * (wa * x + wb * y)).collect()
        };
        if l2 != 0.0 || l3 != 0.0 {
            seeds.push(seed_vec(&g, v, combine(&terms.lp_grad_v, l2, &terms.di_grad_v, l3))?);
        }
        if l3 != 0.0 || l4 != 0.0 {
            seeds.push(seed_vec(&g, f, combine(&terms.di_grad_f, l3, &terms.ds_grad_f, l4))?);
        }
        if l2 != 0.0 || l4 != 0.0 {
            for (i, &p) in prompts.iter().enumerate() {
                let grad = combine(&terms.lp_grad_prompts[i], l2, &terms.ds_grad_prompts[i], l4);
                seeds.push(seed_vec(&g, p, grad)?);
            }
        }
    }
    let grads = if seeds.is_empty() {
        Gradients::new(model.store.len())
    } else {
        g.backward(seeds)?
    };
    Ok((parts, grads))
}

fn check_finite(parts: &LossParts, step: u64) -> Result<()> {
    for (term, v) in [
        ("L_od", parts.l_od),
        ("L_lp", parts.l_lp),
        ("L_di", parts.l_di),
        ("L_ds", parts.l_ds),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// One joint step over `batch` with the configured loss weights.
pub fn train_step(state: &mut TrainState, batch: &[ImageSample]) -> Result<LossBreakdown> {
    let plan = StepPlan::joint(&state.model.config);
    train_step_with(state, batch, &plan)
}

/// Batch-mean losses under `plan` and the gradient of the weighted total
/// with respect to every parameter in the graph.
pub fn loss_and_gradients(model: &Model, batch: &[ImageSample], plan: &StepPlan, step: u64) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let wants_domain = plan.lambdas[1..].iter().any(|&l| l != 0.0);
    if wants_domain && model.config.prompt_mode != PromptMode::DetectorOnly && model.domain.is_none() {
        return Err(Error::DomainModulesAbsent);
    }
    let weight = 1.0 / batch.len() as f64;
    let results: Vec<(LossParts, Gradients)> = batch
        .par_iter()
        .map(|s| sample_pass(model, s, plan, weight))
        .collect::<Result<_>>()?;

    let mut grads = Gradients::new(model.store.len());
    let mut parts = LossParts::default();
    for (p, g) in &results {
        grads.merge(g);
        parts.l_od += p.l_od * weight;
        parts.l_lp += p.l_lp * weight;
        parts.l_di += p.l_di * weight;
        parts.l_ds += p.l_ds * weight;
    }
    check_finite(&parts, step)?;
    let breakdown = total_loss(parts, plan.lambdas).map_err(|_| Error::NonFinite {
        term: "L_total".into(),
        step,
    })?;
    Ok((breakdown, grads))
}

pub fn train_step_with(state: &mut TrainState, batch: &[ImageSample], plan: &StepPlan) -> Result<LossBreakdown> {
    let step = state.progress.step;
    let (breakdown, grads) = loss_and_gradients(&state.model, batch, plan, step)?;
    let model = &state.model;
    let cfg = model.config.clone();

    let (lr, wd) = match cfg.decay_mode {
        DecayMode::WeightDecay => (cfg.lr, cfg.weight_decay),
        DecayMode::LrDecay => (cfg.lr / (1.0 + cfg.weight_decay * step as f64), 0.0),
    };
    let momentum = cfg.momentum;
    let groups: Vec<ParamGroup> = model.store.entries().iter().map(|e| e.group).collect();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let group = groups[id.index()];
        if !group_trainable(group, &cfg, plan) {
            continue;
        }
        let Some(grad) = grads.get(id) else {
            continue;
        };
        let decay = if group_decayed(group) { wd } else { 0.0 };
        sgd_momentum_update(
            state.model.store.get_mut(id).data_mut(),
            state.velocity[id.index()].data_mut(),
            grad.data(),
            lr,
            momentum,
            decay,
        );
    }
    state.progress.step += 1;
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize)]
struct StepRow<'a> {
    kind: &'a str,
    step: u64,
    epoch: usize,
    phase: &'a str,
    #[serde(flatten)]
    loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize)]
struct EvalRow<'a> {
    kind: &'a str,
    step: u64,
    epoch: usize,
    #[serde(rename = "mAP50")]
    map50: Option<f64>,
    #[serde(rename = "mAP75")]
    map75: Option<f64>,
    #[serde(rename = "mAP50_95")]
    map50_95: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitOptions {
    /// Fine-tune prompts alone first, then train the detector against the
    /// frozen prompts.
    pub two_step: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    /// One row per step.
    pub history: Vec<LossBreakdown>,
    /// One report per epoch when an evaluation set is given.
    pub evaluations: Vec<EvalReport>,
}

impl FitResult {
    /// Mean of `f` over the steps of each epoch.
    pub fn epoch_means(&self, steps_per_epoch: usize, f: impl Fn(&LossBreakdown) -> f64) -> Vec<f64> {
        self.history
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().map(&f).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Domain classes of the training samples, honoring `num_domain_classes`.
pub fn domain_classes_for(cfg: &RunConfig, samples: &[ImageSample]) -> Result<DomainClasses> {
    DomainClasses::from_observed(samples.iter().map(|s| s.domain))?.with_override(cfg.num_domain_classes)
}

/// Trains in memory. `log` receives one JSON line per step and per
/// evaluation.
pub fn fit(
    cfg: &RunConfig,
    categories: &CategorySet,
    train: &[ImageSample],
    eval: Option<&[ImageSample]>,
    options: FitOptions,
    log: &mut dyn Write,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for s in train {
        s.validate(categories)?;
    }
    let classes = domain_classes_for(cfg, train)?;
    let model = Model::new(cfg, categories.clone(), Some(classes))?;
    fit_from(TrainState::new(model), train, eval, options, log)
}

/// Continues training from `state`.
pub fn fit_from(
    mut state: TrainState,
    train: &[ImageSample],
    eval: Option<&[ImageSample]>,
    options: FitOptions,
    log: &mut dyn Write,
) -> Result<FitResult> {
    let cfg = state.model.config.clone();
    let ctx = seed_all(cfg.seed);
    let mut phases: Vec<(&str, StepPlan, usize)> = Vec::new();
    if options.two_step {
        if cfg.prompt_mode == PromptMode::DetectorOnly {
            return Err(Error::Invalid("two-step training needs manual or learnable prompts".into()));
        }
        let [l1, l2, l3, l4] = cfg.lambdas;
        phases.push((
            "prompts",
            StepPlan {
                lambdas: [0.0, l2, 0.0, 0.0],
                train_detector: false,
                train_prompts: true,
            },
            cfg.two_step_prompt_epochs,
        ));
        phases.push((
            "detector",
            StepPlan {
                lambdas: [l1, 0.0, l3, l4],
                train_detector: true,
                train_prompts: false,
            },
            cfg.epochs,
        ));
    } else {
        phases.push(("joint", StepPlan::joint(&cfg), cfg.epochs));
    }

    let mut history = Vec::new();
    let mut evaluations = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_counter = 0usize;
    let io = |e| Error::io(Path::new("<metrics log>"), e);
    for (phase, plan, epochs) in phases {
        for _ in 0..epochs {
            order.sort_unstable();
            order.shuffle(&mut ctx.rng_indexed("shuffle", epoch_counter as u64));
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<ImageSample> = chunk.iter().map(|&i| train[i].clone()).collect();
                let loss = train_step_with(&mut state, &batch, &plan)?;
                let row = StepRow {
                    kind: "step",
                    step: state.progress.step,
                    epoch: epoch_counter,
                    phase,
                    loss,
                };
                writeln!(log, "{}", serde_json::to_string(&row)?).map_err(io)?;
                history.push(loss);
            }
            state.progress.epoch = epoch_counter + 1;
            if let Some(eval) = eval {
                let (report, _) = state.model.evaluate(eval)?;
                let row = EvalRow {
                    kind: "eval",
                    step: state.progress.step,
                    epoch: epoch_counter,
                    map50: report.map50,
                    map75: report.map75,
                    map50_95: report.map50_95,
                };
                writeln!(log, "{}", serde_json::to_string(&row)?).map_err(io)?;
                info!(
                    "epoch {epoch_counter}: mAP50 {:.4}",
                    report.map50.unwrap_or(0.0)
                );
                evaluations.push(report);
            }
            epoch_counter += 1;
        }
    }
    log.flush().map_err(io)?;
    Ok(FitResult {
        state,
        history,
        evaluations,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub result: FitResult,
}

/// Loads the datasets, trains, and writes `checkpoint.bin` and
/// `metrics.jsonl` into `out_dir`.
pub fn train(
    cfg: &RunConfig,
    train_set: &DatasetIndex,
    eval_set: Option<&DatasetIndex>,
    options: FitOptions,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_samples = train_set.load_all(cfg.image_size, cfg.channels)?;
    let eval_samples = eval_set
        .map(|e| e.load_all(cfg.image_size, cfg.channels))
        .transpose()?;
    let metrics = out_dir.join(METRICS_FILE);
    let file = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut log = BufWriter::new(file);
    let result = fit(
        cfg,
        &train_set.categories,
        &train_samples,
        eval_samples.as_deref(),
        options,
        &mut log,
    )?;
    drop(log);
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    result.state.model.save(&checkpoint, result.state.progress)?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthetic_index, Split};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply_text("strides = 8,16\nfpn_channels = 8\nembed_dim = 16\ntoken_dim = 8\ntext_hidden = 16\nbatch_size = 4\nepochs = 1")
            .unwrap();
        cfg
    }

    fn samples(n: usize) -> Vec<ImageSample> {
        let idx = synthetic_index(
            &["low,front,day".parse().unwrap(), "high,bird,night".parse().unwrap()],
            n,
            5,
            64,
            Split::Train,
        );
        idx.load_all(64, 3).unwrap()
    }

    #[test]
    fn momentum_matches_recurrence() {
        // f(x) = 0.5 a x^2, gradient a x
        let (a, lr, mu) = (3.0, 0.05, 0.9);
        let (mut theta, mut vel) = ([2.0], [0.0]);
        let (mut t_ref, mut v_ref) = (2.0f64, 0.0f64);
        for _ in 0..10 {
            let g = [a * theta[0]];
            sgd_momentum_update(&mut theta, &mut vel, &g, lr, mu, 0.0);
            v_ref = mu * v_ref - lr * a * t_ref;
            t_ref += v_ref;
            assert!((theta[0] - t_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_are_deterministic_and_total_is_consistent() {
        let cfg = tiny_cfg();
        let data = samples(2);
        let classes = domain_classes_for(&cfg, &data).unwrap();
        let model = Model::new(&cfg, CategorySet::synthetic(), Some(classes)).unwrap();
        let mut a = TrainState::new(model.clone());
        let mut b = TrainState::new(model);
        let la = train_step(&mut a, &data).unwrap();
        let lb = train_step(&mut b, &data).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.store, b.model.store);
        let recomputed = cfg.lambdas[0] * la.l_od
            + cfg.lambdas[1] * la.l_lp
            + cfg.lambdas[2] * la.l_di
            + cfg.lambdas[3] * la.l_ds;
        assert_eq!(la.l_total, recomputed);
    }

    #[test]
    fn frozen_encoders_do_not_move_and_heads_do() {
        let cfg = tiny_cfg();
        let data = samples(2);
        let classes = domain_classes_for(&cfg, &data).unwrap();
        let model = Model::new(&cfg, CategorySet::synthetic(), Some(classes)).unwrap();
        let before = model.store.clone();
        let mut state = TrainState::new(model);
        train_step(&mut state, &data).unwrap();
        let changed = |group: ParamGroup| {
            before
                .entries()
                .iter()
                .zip(state.model.store.entries())
                .filter(|(e, _)| e.group == group)
                .any(|(e, f)| e.tensor != f.tensor)
        };
        assert!(!changed(ParamGroup::VisionEncoder));
        assert!(!changed(ParamGroup::TextEncoder));
        assert!(!changed(ParamGroup::TextVocab));
        assert!(changed(ParamGroup::Detector));
        assert!(changed(ParamGroup::Fsn));
        assert!(changed(ParamGroup::PromptBank));
    }

    #[test]
    fn checkpoint_round_trip_and_strip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let data = samples(1);
        let classes = domain_classes_for(&cfg, &data).unwrap();
        let model = Model::new(&cfg, CategorySet::synthetic(), Some(classes)).unwrap();
        let full = dir.path().join("full.bin");
        model.save(&full, Progress { epoch: 3, step: 7 }).unwrap();
        let (loaded, progress) = Model::load(&full).unwrap();
        assert_eq!(progress, Progress { epoch: 3, step: 7 });
        assert_eq!(loaded.store, model.store);

        let stripped = dir.path().join("stripped.bin");
        strip_domain_modules(&full, &stripped).unwrap();
        assert!(fs::metadata(&stripped).unwrap().len() < fs::metadata(&full).unwrap().len());
        let (small, _) = Model::load(&stripped).unwrap();
        assert!(!small.has_domain_modules());
        assert_eq!(small.detect(&data[0].image).unwrap(), model.detect(&data[0].image).unwrap());
        let mut state = TrainState::new(small);
        let e = train_step(&mut state, &data).unwrap_err();
        assert!(e.to_string().contains("domain modules absent"));
    }

    #[test]
    fn non_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"not a checkpoint").unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}

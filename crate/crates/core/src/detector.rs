//! A compact multi-scale anchor detector.
//!
//! Backbone: a chain of stride-2 3x3 convolutions. Pyramid: 1x1 laterals
//! merged top-down with nearest upsampling. Head: a shared 3x3 convolution
//! followed by 1x1 classification (background + categories) and box
//! regression branches, with `ratios.len()` anchors per location.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou_unchecked, BBox};
use crate::config::{AlignmentLevel, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::sample::{CategorySet, GtBox};
use crate::seed::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Transition point of the smooth-L1 box loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
/// Largest log-scale box delta accepted when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PyramidNodes {
    pub levels: Vec<NodeId>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HeadNodes {
    pub cls: Vec<NodeId>,
    pub reg: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            &format!("detector.{name}.weight"),
            Tensor::randn(&[out_c, in_c, k, k], std, rng),
        );
        let bias = store.add(&format!("detector.{name}.bias"), Tensor::zeros(&[out_c]));
        Self { weight, bias }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, stride, pad)
    }
}

/// Static detector hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub channels: usize,
    pub fpn_channels: usize,
    pub strides: Vec<usize>,
    pub anchor_scale: f64,
    pub anchor_ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub categories: Vec<u32>,
}

impl DetectorSpec {
    pub fn from_config(cfg: &RunConfig, categories: &CategorySet) -> Self {
        Self {
            channels: cfg.channels,
            fpn_channels: cfg.fpn_channels,
            strides: cfg.strides.clone(),
            anchor_scale: cfg.anchor_scale,
            anchor_ratios: cfg.anchor_ratios.clone(),
            pos_iou: cfg.pos_iou,
            neg_iou: cfg.neg_iou,
            categories: categories.ids(),
        }
    }

    pub fn num_anchor_shapes(&self) -> usize {
        self.anchor_ratios.len()
    }

    /// Background plus one class per category.
    pub fn num_classes(&self) -> usize {
        self.categories.len() + 1
    }
}

fn stage_width(stage: usize) -> usize {
    (8usize << stage).min(32)
}

#[derive(Debug, Clone)]
pub struct Detector {
    spec: DetectorSpec,
    backbone: Vec<Conv>,
    laterals: Vec<Conv>,
    head: Conv,
    cls: Conv,
    reg: Conv,
}

impl Detector {
    pub fn new(store: &mut ParamStore, spec: DetectorSpec, rng: &mut Rng) -> Result<Self> {
        if spec.strides.len() < 2 {
            return Err(Error::Invalid("detector needs at least two pyramid levels".into()));
        }
        if spec.categories.is_empty() {
            return Err(Error::Invalid("detector needs at least one category".into()));
        }
        let top = *spec.strides.last().unwrap();
        let stages = top.trailing_zeros() as usize;
        let mut backbone = Vec::with_capacity(stages);
        let mut in_c = spec.channels;
        for s in 0..stages {
            let out_c = stage_width(s);
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            backbone.push(Conv::new(store, &format!("backbone{s}"), out_c, in_c, 3, std, rng));
            in_c = out_c;
        }
        let c = spec.fpn_channels;
        let laterals = spec
            .strides
            .iter()
            .enumerate()
            .map(|(l, &s)| {
                let stage = s.trailing_zeros() as usize - 1;
                let in_c = stage_width(stage);
                Conv::new(store, &format!("lateral{l}"), c, in_c, 1, (1.0 / in_c as f64).sqrt(), rng)
            })
            .collect();
        let head = Conv::new(store, "head", c, c, 3, (2.0 / (c * 9) as f64).sqrt(), rng);
        let a = spec.num_anchor_shapes();
        let cls = Conv::new(store, "cls", a * spec.num_classes(), c, 1, 0.01, rng);
        let reg = Conv::new(store, "reg", a * 4, c, 1, 0.01, rng);
        Ok(Self {
            spec,
            backbone,
            laterals,
            head,
            cls,
            reg,
        })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn categories(&self) -> &[u32] {
        &self.spec.categories
    }

    /// Backbone and pyramid on `g`. Levels are ordered finest first.
    pub fn pyramid(&self, g: &mut Graph<'_>, image: NodeId) -> Result<PyramidNodes> {
        let (c, h, w) = g.value(image).dims3()?;
        if c != self.spec.channels {
            return Err(Error::Shape(format!(
                "detector expects {} channels, got {c}",
                self.spec.channels
            )));
        }
        let top = *self.spec.strides.last().unwrap();
        if h < top || w < top {
            return Err(Error::Shape(format!(
                "image {h}x{w} is smaller than the largest stride {top}"
            )));
        }
        if h % top != 0 || w % top != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not a multiple of the largest stride {top}"
            )));
        }
        // map [0, 1] pixels to [-1, 1]
        let shift = g.constant(Tensor::filled(&[c, h, w], -0.5));
        let shifted = g.add(image, shift)?;
        let mut x = g.scale(shifted, 2.0);
        let mut stage_out = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let y = conv.apply(g, x, 2, 1)?;
            x = g.relu(y);
            stage_out.push(x);
        }
        let mut levels = vec![None; self.spec.strides.len()];
        let mut above: Option<NodeId> = None;
        for (l, &s) in self.spec.strides.iter().enumerate().rev() {
            let stage = s.trailing_zeros() as usize - 1;
            let lat = self.laterals[l].apply(g, stage_out[stage], 1, 0)?;
            let merged = match above {
                Some(up) => {
                    let up = g.upsample2(up)?;
                    g.add(lat, up)?
                }
                None => lat,
            };
            levels[l] = Some(merged);
            above = Some(merged);
        }
        Ok(PyramidNodes {
            levels: levels.into_iter().map(Option::unwrap).collect(),
            strides: self.spec.strides.clone(),
        })
    }

    pub fn head(&self, g: &mut Graph<'_>, pyramid: &PyramidNodes) -> Result<HeadNodes> {
        let mut cls = Vec::with_capacity(pyramid.levels.len());
        let mut reg = Vec::with_capacity(pyramid.levels.len());
        for &level in &pyramid.levels {
            let h = self.head.apply(g, level, 1, 1)?;
            let h = g.relu(h);
            cls.push(self.cls.apply(g, h, 1, 0)?);
            reg.push(self.reg.apply(g, h, 1, 0)?);
        }
        Ok(HeadNodes { cls, reg })
    }

    /// Value-level pyramid of one image.
    pub fn extract_pyramid(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let p = self.pyramid(&mut g, x)?;
        Ok(FeaturePyramid {
            levels: p.levels.iter().map(|&n| g.value(n).clone()).collect(),
            strides: p.strides,
        })
    }

    /// Anchors for the given per-level grid sizes, in head output order.
    pub fn anchors(&self, grids: &[(usize, usize)]) -> Vec<BBox> {
        generate_anchors(
            &self.spec.strides,
            grids,
            self.spec.anchor_scale,
            &self.spec.anchor_ratios,
        )
    }

    fn grids(g: &Graph<'_>, head: &HeadNodes) -> Vec<(usize, usize)> {
        head.cls
            .iter()
            .map(|&n| {
                let s = g.value(n).shape();
                (s[1], s[2])
            })
            .collect()
    }

    /// Detection loss of one image. Returns the loss and the seed gradients
    /// for the head outputs.
    pub fn loss(
        &self,
        g: &Graph<'_>,
        head: &HeadNodes,
        ground_truth: &[GtBox],
    ) -> Result<(AnchorLoss, Vec<(NodeId, Tensor)>)> {
        let grids = Self::grids(g, head);
        let anchors = self.anchors(&grids);
        let k1 = self.spec.num_classes();
        let a = self.spec.num_anchor_shapes();
        let logits = gather_anchor_rows(g, &head.cls, a, k1);
        let deltas = gather_anchor_rows(g, &head.reg, a, 4);
        let gts = ground_truth
            .iter()
            .map(|b| {
                let idx = self
                    .spec
                    .categories
                    .iter()
                    .position(|c| *c == b.category)
                    .ok_or_else(|| {
                        Error::Dataset(format!("category {} unknown to the detector", b.category))
                    })?;
                Ok((b.bbox, idx))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = anchor_loss(
            &anchors,
            &logits,
            &deltas,
            k1,
            &gts,
            self.spec.pos_iou,
            self.spec.neg_iou,
        );
        let mut seeds = scatter_anchor_rows(g, &head.cls, a, k1, &loss.grad_logits);
        seeds.extend(scatter_anchor_rows(g, &head.reg, a, 4, &loss.grad_deltas));
        Ok((loss, seeds))
    }

    /// Scores, decodes, filters and suppresses. Output is sorted by
    /// descending score.
    pub fn detect(
        &self,
        store: &ParamStore,
        image: &Tensor,
        score_threshold: f64,
        nms_iou: f64,
        max_detections: usize,
    ) -> Result<Vec<Detection>> {
        let (_, h, w) = image.dims3()?;
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let p = self.pyramid(&mut g, x)?;
        let head = self.head(&mut g, &p)?;
        let grids = Self::grids(&g, &head);
        let anchors = self.anchors(&grids);
        let k1 = self.spec.num_classes();
        let a = self.spec.num_anchor_shapes();
        let logits = gather_anchor_rows(&g, &head.cls, a, k1);
        let deltas = gather_anchor_rows(&g, &head.reg, a, 4);
        let mut candidates = Vec::new();
        for (i, anchor) in anchors.iter().enumerate() {
            let probs = softmax(&logits[i * k1..(i + 1) * k1]);
            let (best, score) = probs[1..]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
            if score < score_threshold {
                continue;
            }
            let d = [deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]];
            let Some(bbox) = decode_box(anchor, &d).clip(w as f64, h as f64) else {
                continue;
            };
            candidates.push(Detection {
                bbox,
                category: self.spec.categories[best],
                score,
            });
        }
        let mut kept = nms(&candidates, nms_iou);
        kept.truncate(max_detections);
        Ok(kept)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    crate::alignment::softmax(logits)
}

pub fn generate_anchors(
    strides: &[usize],
    grids: &[(usize, usize)],
    scale: f64,
    ratios: &[f64],
) -> Vec<BBox> {
    let mut anchors = Vec::new();
    for (&s, &(gh, gw)) in strides.iter().zip(grids) {
        let size = scale * s as f64;
        for y in 0..gh {
            for x in 0..gw {
                let cx = (x as f64 + 0.5) * s as f64;
                let cy = (y as f64 + 0.5) * s as f64;
                for &r in ratios {
                    let w = size / r.sqrt();
                    let h = size * r.sqrt();
                    anchors.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    anchors
}

/// Per-anchor rows of width `per` from (A*per, H, W) head maps, in
/// (level, y, x, anchor) order.
fn gather_anchor_rows(g: &Graph<'_>, maps: &[NodeId], a: usize, per: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for &n in maps {
        let t = g.value(n);
        let (hh, ww) = (t.shape()[1], t.shape()[2]);
        for y in 0..hh {
            for x in 0..ww {
                for ai in 0..a {
                    for k in 0..per {
                        out.push(t.at3(ai * per + k, y, x));
                    }
                }
            }
        }
    }
    out
}

fn scatter_anchor_rows(
    g: &Graph<'_>,
    maps: &[NodeId],
    a: usize,
    per: usize,
    rows: &[f64],
) -> Vec<(NodeId, Tensor)> {
    let mut offset = 0;
    let mut seeds = Vec::with_capacity(maps.len());
    for &n in maps {
        let shape = g.value(n).shape().to_vec();
        let (hh, ww) = (shape[1], shape[2]);
        let mut t = Tensor::zeros(&shape);
        let d = t.data_mut();
        for y in 0..hh {
            for x in 0..ww {
                for ai in 0..a {
                    for k in 0..per {
                        d[((ai * per + k) * hh + y) * ww + x] = rows[offset];
                        offset += 1;
                    }
                }
            }
        }
        seeds.push((n, t));
    }
    seeds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Labels anchors by IoU with the ground truth: positive at or above
/// `pos_iou`, negative below `neg_iou`, ignored in between. Each ground
/// truth box also claims its highest-IoU anchor. Ties go to the lowest
/// index.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<AnchorLabel> {
    let mut labels = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, gt) in gts.iter().enumerate() {
            let v = iou_unchecked(anchor, gt);
            if v > best.0 {
                best = (v, j);
            }
        }
        labels.push(if gts.is_empty() || best.0 < neg_iou {
            AnchorLabel::Negative
        } else if best.0 >= pos_iou {
            AnchorLabel::Positive { gt: best.1 }
        } else {
            AnchorLabel::Ignore
        });
    }
    let mut forced = vec![false; anchors.len()];
    for (j, gt) in gts.iter().enumerate() {
        let mut best = (0.0, usize::MAX);
        for (i, anchor) in anchors.iter().enumerate() {
            let v = iou_unchecked(anchor, gt);
            if v > best.0 {
                best = (v, i);
            }
        }
        if best.1 != usize::MAX && !forced[best.1] {
            forced[best.1] = true;
            labels[best.1] = AnchorLabel::Positive { gt: j };
        }
    }
    labels
}

/// Regression targets of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.w,
        (gy - ay) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

pub fn decode_box(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * anchor.w;
    let cy = ay + d[1] * anchor.h;
    let w = anchor.w * d[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.h * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone)]
pub struct AnchorLoss {
    pub value: f64,
    pub classification: f64,
    pub regression: f64,
    pub num_positive: usize,
    pub num_negative: usize,
    pub grad_logits: Vec<f64>,
    pub grad_deltas: Vec<f64>,
}

/// Anchor classification plus box regression.
///
/// Classification is softmax cross-entropy over background and categories,
/// averaged separately over positive and negative anchors and summed.
/// Regression is smooth-L1 on the four encoded offsets, summed per anchor
/// and averaged over positives. `gts` pairs each box with its class index
/// (0-based, background excluded).
pub fn anchor_loss(
    anchors: &[BBox],
    logits: &[f64],
    deltas: &[f64],
    num_classes: usize,
    gts: &[(BBox, usize)],
    pos_iou: f64,
    neg_iou: f64,
) -> AnchorLoss {
    let boxes: Vec<BBox> = gts.iter().map(|(b, _)| *b).collect();
    let labels = assign_anchors(anchors, &boxes, pos_iou, neg_iou);
    let num_positive = labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
        .count();
    let num_negative = labels.iter().filter(|l| **l == AnchorLabel::Negative).count();
    let mut grad_logits = vec![0.0; logits.len()];
    let mut grad_deltas = vec![0.0; deltas.len()];
    let (mut cls_pos, mut cls_neg, mut reg) = (0.0, 0.0, 0.0);
    for (i, label) in labels.iter().enumerate() {
        let (target, norm) = match label {
            AnchorLabel::Positive { gt } => (gts[*gt].1 + 1, num_positive),
            AnchorLabel::Negative => (0, num_negative),
            AnchorLabel::Ignore => continue,
        };
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let probs = softmax(row);
        let ce = -probs[target].ln();
        let inv = 1.0 / norm as f64;
        for k in 0..num_classes {
            let onehot = if k == target { 1.0 } else { 0.0 };
            grad_logits[i * num_classes + k] = (probs[k] - onehot) * inv;
        }
        match label {
            AnchorLabel::Positive { gt } => {
                cls_pos += ce * inv;
                let t = encode_box(&anchors[i], &gts[*gt].0);
                for j in 0..4 {
                    let diff = deltas[i * 4 + j] - t[j];
                    reg += smooth_l1(diff, SMOOTH_L1_BETA) * inv;
                    grad_deltas[i * 4 + j] = smooth_l1_grad(diff, SMOOTH_L1_BETA) * inv;
                }
            }
            _ => cls_neg += ce * inv,
        }
    }
    let classification = cls_pos + cls_neg;
    AnchorLoss {
        value: classification + reg,
        classification,
        regression: reg,
        num_positive,
        num_negative,
        grad_logits,
        grad_deltas,
    }
}

/// Class-aware greedy non-maximum suppression. Candidates are ranked by
/// descending score, ties by input order; a candidate is dropped when it
/// overlaps an already kept box of the same category by more than
/// `iou_threshold`.
pub fn nms(candidates: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category == c.category && iou_unchecked(&k.bbox, &c.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*c);
        }
    }
    kept
}

/// The pyramid feature that feeds the squeeze network.
pub fn select_alignment_feature(
    g: &mut Graph<'_>,
    pyramid: &PyramidNodes,
    level: AlignmentLevel,
) -> Result<NodeId> {
    if pyramid.levels.is_empty() {
        return Err(Error::Invalid("empty pyramid".into()));
    }
    match level {
        AlignmentLevel::Top => Ok(*pyramid.levels.last().unwrap()),
        AlignmentLevel::Level(i) => pyramid.levels.get(i).copied().ok_or_else(|| {
            Error::Invalid(format!(
                "alignment level {i} out of range for {} levels",
                pyramid.levels.len()
            ))
        }),
        AlignmentLevel::Mean => {
            let top = *pyramid.strides.last().unwrap();
            let mut acc: Option<NodeId> = None;
            for (&n, &s) in pyramid.levels.iter().zip(&pyramid.strides) {
                let pooled = if s == top { n } else { g.avg_pool(n, top / s)? };
                acc = Some(match acc {
                    Some(a) => g.add(a, pooled)?,
                    None => pooled,
                });
            }
            let count = pyramid.levels.len() as f64;
            Ok(g.scale(acc.unwrap(), 1.0 / count))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_all;

    fn build(strides: Vec<usize>) -> (ParamStore, Detector) {
        let mut store = ParamStore::new();
        let spec = DetectorSpec {
            channels: 3,
            fpn_channels: 8,
            strides,
            anchor_scale: 2.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.5,
            neg_iou: 0.4,
            categories: vec![4, 5],
        };
        let det = Detector::new(&mut store, spec, &mut seed_all(1).rng("det")).unwrap();
        (store, det)
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut t = Tensor::uniform(&[3, size, size], 0.5, &mut seed_all(seed).rng("img"));
        for v in t.data_mut() {
            *v += 0.5;
        }
        t
    }

    #[test]
    fn pyramid_levels_follow_strides() {
        let (store, det) = build(vec![8, 16]);
        let p = det.extract_pyramid(&store, &image(64, 1)).unwrap();
        assert_eq!(p.levels.len(), 2);
        assert_eq!(p.levels[0].shape(), &[8, 8, 8]);
        assert_eq!(p.levels[1].shape(), &[8, 4, 4]);
        assert_eq!(p, det.extract_pyramid(&store, &image(64, 1)).unwrap());
    }

    #[test]
    fn small_image_is_rejected() {
        let (store, det) = build(vec![8, 16]);
        assert!(det.extract_pyramid(&store, &image(8, 1)).is_err());
    }

    #[test]
    fn alignment_feature_selection() {
        let (store, det) = build(vec![8, 16, 32]);
        let mut g = Graph::new(&store);
        let x = g.constant(image(64, 2));
        let p = det.pyramid(&mut g, x).unwrap();
        let top = select_alignment_feature(&mut g, &p, AlignmentLevel::Top).unwrap();
        assert_eq!(top, p.levels[2]);
        assert_eq!(g.value(top).shape(), &[8, 2, 2]);
        let first = select_alignment_feature(&mut g, &p, AlignmentLevel::Level(0)).unwrap();
        assert_eq!(g.value(first).shape(), &[8, 8, 8]);
        let mean = select_alignment_feature(&mut g, &p, AlignmentLevel::Mean).unwrap();
        assert_eq!(g.value(mean).shape(), g.value(top).shape());
        // mean mode equals the average of block-pooled levels
        let l0 = g.value(p.levels[0]).clone();
        let l1 = g.value(p.levels[1]).clone();
        let l2 = g.value(p.levels[2]).clone();
        let pool = |t: &Tensor, k: usize, c: usize, y: usize, x: usize| {
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += t.at3(c, y * k + dy, x * k + dx);
                }
            }
            s / (k * k) as f64
        };
        let m = g.value(mean);
        for c in 0..8 {
            for y in 0..2 {
                for x in 0..2 {
                    let expect = (pool(&l0, 4, c, y, x) + pool(&l1, 2, c, y, x) + l2.at3(c, y, x)) / 3.0;
                    assert!((m.at3(c, y, x) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn detect_threshold_above_one_is_empty() {
        let (store, det) = build(vec![8, 16]);
        let out = det.detect(&store, &image(64, 3), 1.1, 0.5, 100).unwrap();
        assert!(out.is_empty());
        let out = det.detect(&store, &image(64, 3), 0.0, 0.5, 100).unwrap();
        assert!(!out.is_empty());
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn nms_collapses_identical_boxes() {
        let d = Detection {
            bbox: BBox::new(1.0, 1.0, 10.0, 10.0),
            category: 4,
            score: 0.9,
        };
        assert_eq!(nms(&[d, d], 0.5).len(), 1);
        let other = Detection { category: 5, ..d };
        assert_eq!(nms(&[d, other], 0.5).len(), 2);
    }

    #[test]
    fn empty_ground_truth_has_zero_regression() {
        let (store, det) = build(vec![8, 16]);
        let mut g = Graph::new(&store);
        let x = g.constant(image(64, 4));
        let p = det.pyramid(&mut g, x).unwrap();
        let head = det.head(&mut g, &p).unwrap();
        let (loss, _) = det.loss(&g, &head, &[]).unwrap();
        assert_eq!(loss.regression, 0.0);
        assert_eq!(loss.num_positive, 0);
        assert!(loss.value > 0.0);
    }

    #[test]
    fn box_coding_round_trips() {
        let a = BBox::new(4.0, 6.0, 16.0, 8.0);
        let g = BBox::new(7.0, 5.0, 12.0, 11.0);
        let d = decode_box(&a, &encode_box(&a, &g));
        for (p, q) in [(d.x, g.x), (d.y, g.y), (d.w, g.w), (d.h, g.h)] {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn every_ground_truth_claims_an_anchor() {
        let anchors = vec![
            BBox::new(0.0, 0.0, 16.0, 16.0),
            BBox::new(16.0, 0.0, 16.0, 16.0),
            BBox::new(0.0, 16.0, 16.0, 16.0),
        ];
        let gt = vec![BBox::new(18.0, 2.0, 4.0, 4.0)];
        let labels = assign_anchors(&anchors, &gt, 0.5, 0.4);
        assert_eq!(labels[1], AnchorLabel::Positive { gt: 0 });
        assert_eq!(labels[0], AnchorLabel::Negative);
        // ties go to the lowest anchor index
        let twins = vec![BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(0.0, 0.0, 8.0, 8.0)];
        let labels = assign_anchors(&twins, &[BBox::new(0.0, 0.0, 8.0, 7.0)], 0.99, 0.4);
        assert_eq!(labels[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(labels[1], AnchorLabel::Ignore);
    }

    #[test]
    fn single_anchor_loss_oracle() {
        let anchor = BBox::new(0.0, 0.0, 8.0, 8.0);
        let gt = BBox::new(1.0, 0.0, 8.0, 8.0);
        let logits = [0.0, 0.0, 0.0];
        let t = encode_box(&anchor, &gt);
        assert!((t[0] - 0.125).abs() < 1e-12);
        let loss = anchor_loss(&[anchor], &logits, &[0.0; 4], 3, &[(gt, 1)], 0.5, 0.4);
        assert_eq!(loss.num_positive, 1);
        let expect_reg = 0.125 - 0.5 * SMOOTH_L1_BETA;
        assert!((loss.classification - 3f64.ln()).abs() < 1e-12);
        assert!((loss.regression - expect_reg).abs() < 1e-12);
        let third = 1.0 / 3.0;
        for (g, e) in loss.grad_logits.iter().zip([third, third, third - 1.0]) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(loss.grad_deltas, vec![-1.0, 0.0, 0.0, 0.0]);

        // a far anchor is a negative with target background
        let far = BBox::new(40.0, 40.0, 8.0, 8.0);
        let loss = anchor_loss(&[anchor, far], &[0.0; 6], &[0.0; 8], 3, &[(anchor, 0)], 0.5, 0.4);
        assert_eq!((loss.num_positive, loss.num_negative), (1, 1));
        assert!((loss.value - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn detector_loss_gradient_matches_finite_differences() {
        let (mut store, det) = build(vec![8, 16]);
        let img = image(64, 5);
        let gts = [GtBox { bbox: BBox::new(10.0, 12.0, 16.0, 8.0), category: 5 }];
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let x = g.constant(img.clone());
            let p = det.pyramid(&mut g, x).unwrap();
            let head = det.head(&mut g, &p).unwrap();
            let (loss, seeds) = det.loss(&g, &head, &gts).unwrap();
            (loss.value, g.backward(seeds).unwrap())
        };
        let (_, grads) = eval(&store);
        for name in ["detector.cls.bias", "detector.lateral1.weight", "detector.backbone0.weight"] {
            let id = store.id_of(name).unwrap();
            let analytic = grads.get(id).expect("gradient").data()[0];
            let h = 1e-5;
            store.get_mut(id).data_mut()[0] += h;
            let (up, _) = eval(&store);
            store.get_mut(id).data_mut()[0] -= 2.0 * h;
            let (down, _) = eval(&store);
            store.get_mut(id).data_mut()[0] += h;
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() < 1e-5 * (1.0 + numeric.abs()),
                "{name}: {analytic} vs {numeric}"
            );
        }
    }
}

//! COCO-style detection metrics, run comparison and detection dumps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

pub use crate::bbox::iou;
use crate::bbox::{iou_unchecked, BBox};
use crate::config::{PromptMode, RunConfig};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::sample::{CategorySet, GtBox, ImageSample};
use crate::training::{fit, FitOptions, Model};

/// Number of recall points of the interpolated precision-recall summary.
pub const RECALL_POINTS: usize = 101;

/// Fraction of a detection's area that, inside an ignored region, removes
/// the detection before matching.
pub const IGNORE_OVERLAP: f64 = 0.5;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| f64::from(50 + 5 * k) / 100.0).collect()
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GtBox>,
    pub ignore_regions: Vec<BBox>,
}

impl ImageEval {
    pub fn new(sample: &ImageSample, detections: Vec<Detection>) -> Self {
        Self {
            id: sample.id.clone(),
            detections,
            ground_truth: sample.boxes.clone(),
            ignore_regions: sample.ignore_regions.clone(),
        }
    }

    fn kept_detections(&self) -> impl Iterator<Item = &Detection> {
        self.detections.iter().filter(|d| {
            let area = d.bbox.area();
            !self
                .ignore_regions
                .iter()
                .any(|r| r.intersection(&d.bbox) > IGNORE_OVERLAP * area)
        })
    }
}

/// Precision-recall points of one category at one threshold, in rank
/// order, plus the number of ground-truth boxes.
pub fn precision_recall(images: &[ImageEval], category: u32, iou_threshold: f64) -> (Vec<(f64, f64)>, usize) {
    let mut ranked: Vec<(usize, &Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.kept_detections().map(move |d| (i, d)))
        .filter(|(_, d)| d.category == category)
        .collect();
    // stable sort keeps input order among equal scores
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let gts: Vec<Vec<&BBox>> = images
        .iter()
        .map(|im| {
            im.ground_truth
                .iter()
                .filter(|g| g.category == category)
                .map(|g| &g.bbox)
                .collect()
        })
        .collect();
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, (img, det)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[*img].iter().enumerate() {
            if matched[*img][j] {
                continue;
            }
            let v = iou_unchecked(&det.bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[*img][j] = true;
            tp += 1;
        }
        let precision = tp as f64 / (k + 1) as f64;
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        curve.push((precision, recall));
    }
    (curve, num_gt)
}

/// 101-point interpolated AP of one category. `None` when the category
/// has no ground truth.
pub fn average_precision(images: &[ImageEval], category: u32, iou_threshold: f64) -> Option<f64> {
    let (curve, num_gt) = precision_recall(images, category, iou_threshold);
    if num_gt == 0 {
        return None;
    }
    Some(interpolated_ap(&curve))
}

fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    // precision envelope from the right
    let mut envelope = vec![0.0; curve.len()];
    let mut running: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        running = running.max(curve[i].0);
        envelope[i] = running;
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < curve.len() && curve[idx].1 < level - 1e-12 {
            idx += 1;
        }
        if idx < curve.len() {
            sum += envelope[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: u32,
    pub name: String,
    pub num_gt: usize,
    /// AP at each of the ten COCO thresholds.
    pub ap: Vec<f64>,
}

impl CategoryAp {
    pub fn ap50(&self) -> f64 {
        self.ap[0]
    }

    pub fn ap75(&self) -> f64 {
        self.ap[5]
    }

    pub fn ap50_95(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP50")]
    pub map50: Option<f64>,
    #[serde(rename = "mAP75")]
    pub map75: Option<f64>,
    #[serde(rename = "mAP50_95")]
    pub map50_95: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    pub images: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn map50_or_zero(&self) -> f64 {
        self.map50.unwrap_or(0.0)
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "images {}  gt {}  detections {}",
            self.images, self.gt_boxes, self.detections
        );
        let _ = writeln!(
            s,
            "mAP50 {}  mAP75 {}  mAP50:95 {}",
            pct(self.map50),
            pct(self.map75),
            pct(self.map50_95)
        );
        let _ = writeln!(s, "{:<18} {:>6} {:>7} {:>7} {:>8}", "category", "gt", "AP50", "AP75", "AP50:95");
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{:<18} {:>6} {:>7.1} {:>7.1} {:>8.1}",
                c.name,
                c.num_gt,
                100.0 * c.ap50(),
                100.0 * c.ap75(),
                100.0 * c.ap50_95()
            );
        }
        s
    }
}

/// mAP at 0.5, 0.75 and averaged over 0.50:0.05:0.95. Categories with no
/// ground truth are skipped.
pub fn map_metrics(images: &[ImageEval], categories: &CategorySet) -> EvalReport {
    let thresholds = coco_thresholds();
    let per_category: Vec<CategoryAp> = categories
        .entries()
        .iter()
        .filter_map(|(id, name)| {
            let ap: Option<Vec<f64>> = thresholds
                .iter()
                .map(|&t| average_precision(images, *id, t))
                .collect();
            let num_gt = images
                .iter()
                .flat_map(|im| &im.ground_truth)
                .filter(|g| g.category == *id)
                .count();
            ap.map(|ap| CategoryAp {
                category: *id,
                name: name.clone(),
                num_gt,
                ap,
            })
        })
        .collect();
    let gt_boxes = images
        .iter()
        .flat_map(|im| &im.ground_truth)
        .filter(|g| categories.contains(g.category))
        .count();
    let detections = images.iter().map(|im| im.detections.len()).sum();
    let mean = |f: fn(&CategoryAp) -> f64| {
        (!per_category.is_empty())
            .then(|| per_category.iter().map(f).sum::<f64>() / per_category.len() as f64)
    };
    if per_category.is_empty() {
        warn!("no ground-truth boxes; metrics are undefined");
    }
    EvalReport {
        map50: mean(CategoryAp::ap50),
        map75: mean(CategoryAp::ap75),
        map50_95: mean(CategoryAp::ap50_95),
        per_category,
        images: images.len(),
        gt_boxes,
        detections,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP75")]
    pub map75: f64,
    #[serde(rename = "mAP50_95")]
    pub map50_95: f64,
    /// Differences to the baseline in percentage points.
    pub delta_pp: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>6} {:>6} {:>8}  {:>7} {:>7} {:>8}",
            "run", "mAP50", "mAP75", "mAP50:95", "d50", "d75", "d50:95"
        );
        for r in &self.rows {
            let mark = if r.run == self.baseline { "*" } else { " " };
            let _ = writeln!(
                s,
                "{:<width$}  {:>6.1} {:>6.1} {:>8.1}  {:>+7.1} {:>+7.1} {:>+8.1}{mark}",
                r.run,
                100.0 * r.map50,
                100.0 * r.map75,
                100.0 * r.map50_95,
                r.delta_pp[0],
                r.delta_pp[1],
                r.delta_pp[2],
            );
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Rows in input order with deltas against `baseline`. Absent metrics
/// count as 0.
pub fn compare_runs(reports: &[(String, EvalReport)], baseline: &str) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Invalid("compare needs at least two runs".into()));
    }
    let mut seen = BTreeSet::new();
    for (name, _) in reports {
        if !seen.insert(name.as_str()) {
            return Err(Error::Invalid(format!("duplicate run name `{name}`")));
        }
    }
    let metrics = |r: &EvalReport| {
        [
            r.map50.unwrap_or(0.0),
            r.map75.unwrap_or(0.0),
            r.map50_95.unwrap_or(0.0),
        ]
    };
    let base = reports
        .iter()
        .find(|(n, _)| n == baseline)
        .map(|(_, r)| metrics(r))
        .ok_or_else(|| Error::Invalid(format!("baseline `{baseline}` is not among the runs")))?;
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let m = metrics(r);
            ComparisonRow {
                run: name.clone(),
                map50: m[0],
                map75: m[1],
                map50_95: m[2],
                delta_pp: [0, 1, 2].map(|i| 100.0 * (m[i] - base[i])),
            }
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_string(),
        rows,
    })
}

/// One line per detection: `image_id,x,y,w,h,score,category`.
pub fn format_detections<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a [Detection])>,
{
    let mut s = String::new();
    for (id, dets) in rows {
        for d in dets {
            let b = d.bbox;
            let _ = writeln!(s, "{id},{},{},{},{},{},{}", b.x, b.y, b.w, b.h, d.score, d.category);
        }
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |message: String| Error::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err(format!("expected 7 fields, got {}", f.len())));
            }
            let num = |k: usize| -> Result<f64> {
                f[k].trim()
                    .parse()
                    .map_err(|_| err(format!("field {} is not a number: `{}`", k + 1, f[k])))
            };
            let category = f[6]
                .trim()
                .parse()
                .map_err(|_| err(format!("field 7 is not a category id: `{}`", f[6])))?;
            Ok((
                f[0].to_string(),
                Detection {
                    bbox: BBox::new(num(1)?, num(2)?, num(3)?, num(4)?),
                    score: num(5)?,
                    category,
                },
            ))
        })
        .collect()
}

pub fn write_detections(path: &Path, images: &[ImageEval]) -> Result<()> {
    let text = format_detections(images.iter().map(|im| (im.id.as_str(), im.detections.as_slice())));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const MAX_ABLATION_LENGTH: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub prompt_mode: PromptMode,
    /// `None` for the manual row, where the template fixes the tokens.
    pub prompt_len: Option<usize>,
    /// Config keys that differ from the learnable base config.
    pub config_diff: Vec<String>,
    pub config_hash: String,
    pub detector_params: usize,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ablation {
    pub base_config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6} {:>6} {:>8}", "prompts", "mAP50", "mAP75", "mAP50:95");
        for r in &self.rows {
            match (&r.report, &r.error) {
                (Some(rep), _) => {
                    let pct = |v: Option<f64>| 100.0 * v.unwrap_or(0.0);
                    let _ = writeln!(
                        s,
                        "{:<width$}  {:>6.1} {:>6.1} {:>8.1}",
                        r.label,
                        pct(rep.map50),
                        pct(rep.map75),
                        pct(rep.map50_95)
                    );
                }
                (None, err) => {
                    let _ = writeln!(s, "{:<width$}  failed: {}", r.label, err.as_deref().unwrap_or("unknown"));
                }
            }
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Checks the requested prompt lengths: each within 1..=64, no repeats.
pub fn validate_ablation_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::Invalid("no prompt lengths given".into()));
    }
    let mut seen = BTreeSet::new();
    for &n in lengths {
        if !(1..=MAX_ABLATION_LENGTH).contains(&n) {
            return Err(Error::Invalid(format!(
                "prompt length {n} outside 1..={MAX_ABLATION_LENGTH}"
            )));
        }
        if !seen.insert(n) {
            return Err(Error::Invalid(format!("duplicate length {n}")));
        }
    }
    Ok(())
}

/// Trains and evaluates one learnable run per prompt length, then one
/// manual-prompt run. All rows share the base seed; learnable rows differ
/// from the base only in `prompt_len`. A failing row records its error
/// and the remaining rows still run.
pub fn ablate_prompt_length(
    lengths: &[usize],
    base: &RunConfig,
    categories: &CategorySet,
    train: &[ImageSample],
    eval: &[ImageSample],
) -> Result<Ablation> {
    validate_ablation_lengths(lengths)?;
    let base = base.with("prompt_mode", "learnable")?;
    let mut configs: Vec<(String, RunConfig, Option<usize>)> = Vec::new();
    for &n in lengths {
        configs.push((format!("n={n}"), base.with("prompt_len", &n.to_string())?, Some(n)));
    }
    let manual = base.with("prompt_mode", "manual")?;
    configs.push((format!("manual({})", manual.token_dim), manual, None));

    let rows = configs
        .into_iter()
        .map(|(label, cfg, prompt_len)| {
            let detector_params = crate::training::domain_classes_for(&cfg, train)
                .and_then(|c| Model::new(&cfg, categories.clone(), Some(c)))
                .map(|m| m.detector_param_count())
                .unwrap_or(0);
            let outcome = fit(&cfg, categories, train, None, FitOptions::default(), &mut std::io::sink())
                .and_then(|r| r.state.model.evaluate(eval).map(|(rep, _)| rep));
            let (report, error) = match outcome {
                Ok(rep) => (Some(rep), None),
                Err(e) => {
                    warn!("ablation row {label} failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            AblationRow {
                label,
                prompt_mode: cfg.prompt_mode,
                prompt_len,
                config_diff: cfg.diff_keys(&base).into_iter().map(str::to_string).collect(),
                config_hash: cfg.hash_hex(),
                detector_params,
                report,
                error,
            }
        })
        .collect();
    Ok(Ablation {
        base_config_hash: base.hash_hex(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            category: 1,
            score,
        }
    }

    fn one_image(dets: Vec<Detection>) -> Vec<ImageEval> {
        vec![ImageEval {
            id: "a".into(),
            detections: dets,
            ground_truth: vec![GtBox {
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
                category: 1,
            }],
            ignore_regions: vec![],
        }]
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&one_image(vec![det(0.0, 0.9)]), 1, 0.5), Some(1.0));
        let tp_first = one_image(vec![det(0.0, 0.9), det(50.0, 0.8)]);
        assert_eq!(average_precision(&tp_first, 1, 0.5), Some(1.0));
        let fp_first = one_image(vec![det(50.0, 0.9), det(0.0, 0.8)]);
        assert!((average_precision(&fp_first, 1, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&fp_first, 2, 0.5), None);
    }

    #[test]
    fn threshold_split() {
        // x offset 2.5 on a 10-wide box: IoU = 75 / 125 = 0.6
        let images = one_image(vec![det(2.5, 0.9)]);
        let cats = CategorySet::new(vec![(1, "car".into())]).unwrap();
        let r = map_metrics(&images, &cats);
        assert_eq!(r.map50, Some(1.0));
        assert_eq!(r.map75, Some(0.0));
    }

    #[test]
    fn perfect_and_empty() {
        let cats = CategorySet::new(vec![(1, "car".into())]).unwrap();
        let r = map_metrics(&one_image(vec![det(0.0, 1.0)]), &cats);
        assert_eq!((r.map50, r.map75, r.map50_95), (Some(1.0), Some(1.0), Some(1.0)));
        let r = map_metrics(&one_image(vec![]), &cats);
        assert_eq!((r.map50, r.map75, r.map50_95), (Some(0.0), Some(0.0), Some(0.0)));
        let mut none = one_image(vec![]);
        none[0].ground_truth.clear();
        assert_eq!(map_metrics(&none, &cats).map50, None);
    }

    #[test]
    fn ignored_regions_drop_detections() {
        let mut images = one_image(vec![det(50.0, 0.9), det(0.0, 0.8)]);
        images[0].ignore_regions.push(BBox::new(48.0, 0.0, 20.0, 20.0));
        assert_eq!(average_precision(&images, 1, 0.5), Some(1.0));
    }

    fn report(m: [f64; 3]) -> EvalReport {
        EvalReport {
            map50: Some(m[0]),
            map75: Some(m[1]),
            map50_95: Some(m[2]),
            per_category: vec![],
            images: 0,
            gt_boxes: 0,
            detections: 0,
        }
    }

    #[test]
    fn comparison_deltas() {
        let runs = vec![
            ("baseline".to_string(), report([0.397, 0.248, 0.237])),
            ("method".to_string(), report([0.421, 0.255, 0.248])),
        ];
        let c = compare_runs(&runs, "baseline").unwrap();
        let d = c.rows[1].delta_pp;
        for (got, want) in d.iter().zip([2.4, 0.7, 1.1]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert_eq!(c.rows[0].delta_pp, [0.0; 3]);
        let dup = vec![runs[0].clone(), runs[0].clone()];
        assert!(compare_runs(&dup, "baseline").is_err());
        assert!(compare_runs(&runs, "other").is_err());
    }

    #[test]
    fn detection_dump_round_trip() {
        let dets = [det(1.25, 0.123456789), det(3.0, 0.5)];
        let text = format_detections([("img_1", &dets[..])]);
        let parsed = parse_detections(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].1, dets[0]);
        assert_eq!(parsed[1].0, "img_1");
    }
}

//! VisDrone-format ingestion and the synthetic domain-shift scene generator.
//!
//! Both sources share one on-disk layout:
//!
//! ```text
//! root/
//!   images/<stem>.png|jpg
//!   annotations/<stem>.txt     one 8-field VisDrone line per object
//!   metadata.txt               <stem>,<altitude>,<view>,<weather>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::{Altitude, DomainLabel, View, Weather};
use crate::error::{Error, Result};
use crate::sample::{CategorySet, GtBox, ImageSample, IGNORED_REGION, OTHERS};
use crate::seed::{seed_all, Rng};
use crate::tensor::Tensor;

pub const METADATA_FILE: &str = "metadata.txt";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One annotation line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisDroneRecord {
    pub left: i64,
    pub top: i64,
    pub width: i64,
    pub height: i64,
    pub score: i64,
    pub category: u32,
    pub truncation: i64,
    pub occlusion: i64,
}

impl VisDroneRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.left as f64,
            self.top as f64,
            self.width as f64,
            self.height as f64,
        )
    }

    /// Ignored regions are masked out of training targets and evaluation.
    pub fn is_ignored_region(&self) -> bool {
        self.category == IGNORED_REGION
    }

    /// True for records that never become ground truth: ignored regions and
    /// the "others" class.
    pub fn is_excluded(&self) -> bool {
        self.category == IGNORED_REGION || self.category == OTHERS
    }
}

impl fmt::Display for VisDroneRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.left,
            self.top,
            self.width,
            self.height,
            self.score,
            self.category,
            self.truncation,
            self.occlusion
        )
    }
}

/// Parses one annotation line. `line_no` is 1-based and only used in errors.
pub fn parse_visdrone_line(line: &str, line_no: usize) -> Result<VisDroneRecord> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
    if fields.len() != 8 {
        return Err(err(format!("expected 8 fields, got {}", fields.len())));
    }
    let mut v = [0i64; 8];
    for (i, f) in fields.iter().enumerate() {
        v[i] = f
            .trim()
            .parse()
            .map_err(|_| err(format!("field {} is not an integer: `{}`", i + 1, f)))?;
    }
    if !(0..=i64::from(OTHERS)).contains(&v[5]) {
        return Err(err(format!("category {} outside 0..=11", v[5])));
    }
    Ok(VisDroneRecord {
        left: v[0],
        top: v[1],
        width: v[2],
        height: v[3],
        score: v[4],
        category: v[5] as u32,
        truncation: v[6],
        occlusion: v[7],
    })
}

/// Parses a whole annotation file, skipping blank lines.
pub fn parse_annotations(text: &str) -> Result<Vec<VisDroneRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_visdrone_line(l, i + 1))
        .collect()
}

pub fn format_annotations(records: &[VisDroneRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Heldout => "heldout",
        })
    }
}

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub domain: DomainLabel,
    pub object_count: usize,
    /// (height, width)
    pub canvas: (usize, usize),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    Files { image: PathBuf, annotation: PathBuf },
    Synthetic(SceneSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub domain: DomainLabel,
    pub source: SampleSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub categories: CategorySet,
    pub split: Split,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> BTreeSet<DomainLabel> {
        self.entries.iter().map(|e| e.domain).collect()
    }

    /// Number of samples per domain.
    pub fn domain_counts(&self) -> BTreeMap<DomainLabel, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.domain).or_insert(0) += 1;
        }
        counts
    }

    /// Keeps the first `n` entries.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            entries: self.entries.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    /// Materialises one sample at `size`x`size` with `channels` channels.
    pub fn load_sample(&self, i: usize, size: usize, channels: usize) -> Result<ImageSample> {
        let entry = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))?;
        let sample = match &entry.source {
            SampleSource::Synthetic(spec) => {
                let mut s = generate_scene(spec)?;
                s.id = entry.id.clone();
                if s.height() != size || s.width() != size || channels != 3 {
                    s = resample(s, size, channels);
                }
                s
            }
            SampleSource::Files { image, annotation } => {
                load_file_sample(&entry.id, image, annotation, entry.domain, size, channels)?
            }
        };
        Ok(filter_categories(sample, &self.categories))
    }

    /// Loads every sample in index order.
    pub fn load_all(&self, size: usize, channels: usize) -> Result<Vec<ImageSample>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.load_sample(i, size, channels))
            .collect()
    }
}

fn filter_categories(mut sample: ImageSample, categories: &CategorySet) -> ImageSample {
    sample.boxes.retain(|b| categories.contains(b.category));
    sample
}

/// Reads a VisDrone-style directory. Images without a metadata row get
/// `fallback` and a warning.
pub fn load_visdrone(
    root: &Path,
    metadata: Option<&Path>,
    fallback: DomainLabel,
    categories: CategorySet,
    split: Split,
) -> Result<DatasetIndex> {
    let images_dir = root.join("images");
    let ann_dir = root.join("annotations");
    let mut images: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            images.push((stem.to_string(), path));
        }
    }
    images.sort();
    let missing: Vec<&str> = images
        .iter()
        .filter(|(stem, _)| !ann_dir.join(format!("{stem}.txt")).is_file())
        .map(|(stem, _)| stem.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing annotations for: {}",
            missing.join(", ")
        )));
    }
    let default_meta = root.join(METADATA_FILE);
    let meta_path = metadata
        .map(Path::to_path_buf)
        .or_else(|| default_meta.is_file().then_some(default_meta));
    let domains = match &meta_path {
        Some(p) => read_metadata(p)?,
        None => BTreeMap::new(),
    };
    let mut entries = Vec::with_capacity(images.len());
    let mut fallbacks = 0;
    for (stem, path) in images {
        let domain = domains.get(&stem).copied().unwrap_or_else(|| {
            fallbacks += 1;
            fallback
        });
        entries.push(IndexEntry {
            id: stem.clone(),
            domain,
            source: SampleSource::Files {
                image: path,
                annotation: ann_dir.join(format!("{stem}.txt")),
            },
        });
    }
    if fallbacks > 0 {
        warn!("{fallbacks} image(s) lack domain metadata; using fallback domain {fallback}");
    }
    Ok(DatasetIndex {
        entries,
        categories,
        split,
    })
}

/// Reads a metadata sidecar: `stem,altitude,view,weather` per line. Blank
/// lines and lines starting with `#` are skipped.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, DomainLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn parse_metadata(text: &str) -> Result<BTreeMap<String, DomainLabel>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (stem, domain) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `stem,altitude,view,weather`".into(),
        })?;
        let domain: DomainLabel = domain.parse().map_err(|e: Error| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(stem.trim().to_string(), domain);
    }
    Ok(map)
}

pub fn format_metadata<'a, I: IntoIterator<Item = (&'a str, DomainLabel)>>(rows: I) -> String {
    rows.into_iter().map(|(stem, d)| format!("{stem},{d}\n")).collect()
}

fn load_file_sample(
    id: &str,
    image_path: &Path,
    annotation_path: &Path,
    domain: DomainLabel,
    size: usize,
    channels: usize,
) -> Result<ImageSample> {
    let img = image::open(image_path)
        .map_err(|e| Error::Image {
            path: image_path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w0, h0) = img.dimensions();
    let img = if (w0 as usize, h0 as usize) != (size, size) {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let text = fs::read_to_string(annotation_path).map_err(|e| Error::io(annotation_path, e))?;
    let records = parse_annotations(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", annotation_path.display())))?;
    let (sx, sy) = (size as f64 / f64::from(w0), size as f64 / f64::from(h0));
    let mut boxes = Vec::new();
    let mut ignore_regions = Vec::new();
    for r in records {
        if r.width <= 0 || r.height <= 0 {
            continue;
        }
        let b = r.bbox();
        let scaled = BBox::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy);
        let Some(clipped) = scaled.clip(size as f64, size as f64) else {
            continue;
        };
        if r.is_ignored_region() {
            ignore_regions.push(clipped);
        } else if !r.is_excluded() {
            boxes.push(GtBox {
                bbox: clipped,
                category: r.category,
            });
        }
    }
    Ok(ImageSample {
        id: id.to_string(),
        image: rgb8_to_tensor(&img, channels),
        boxes,
        ignore_regions,
        domain,
    })
}

/// Converts an 8-bit RGB image to a (channels, H, W) tensor in [0, 1].
/// One channel means luma.
pub fn rgb8_to_tensor(img: &ImageBuffer<Rgb<u8>, Vec<u8>>, channels: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[channels, h, w]);
    let d = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        let rgb = p.0.map(|v| f64::from(v) / 255.0);
        if channels == 1 {
            d[y * w + x] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        } else {
            for c in 0..channels {
                d[(c * h + y) * w + x] = rgb[c.min(2)];
            }
        }
    }
    t
}

/// Converts a (C, H, W) tensor in [0, 1] to 8-bit RGB. One channel is
/// replicated, extra channels are dropped.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let (c, h, w) = t.dims3()?;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = t.at3(ch.min(c - 1), y as usize, x as usize);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb8(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn resample(sample: ImageSample, size: usize, channels: usize) -> ImageSample {
    let rgb = tensor_to_rgb8(&sample.image).expect("sample image is (C,H,W)");
    let (w0, h0) = (sample.width() as f64, sample.height() as f64);
    let rgb = if (sample.width(), sample.height()) != (size, size) {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    let (sx, sy) = (size as f64 / w0, size as f64 / h0);
    let scale = |b: BBox| BBox::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy);
    ImageSample {
        image: rgb8_to_tensor(&rgb, channels),
        boxes: sample
            .boxes
            .iter()
            .map(|b| GtBox {
                bbox: scale(b.bbox),
                category: b.category,
            })
            .collect(),
        ignore_regions: sample.ignore_regions.iter().map(|b| scale(*b)).collect(),
        ..sample
    }
}

/// Vehicle footprint (width, height) in pixels at low altitude, with its
/// category id.
const VEHICLES: [(f64, f64, u32); 3] = [(16.0, 8.0, 4), (18.0, 10.0, 5), (26.0, 10.0, 6)];
const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.12, 0.10],
    [0.12, 0.22, 0.80],
    [0.95, 0.95, 0.93],
    [0.95, 0.80, 0.12],
    [0.10, 0.10, 0.12],
    [0.55, 0.58, 0.62],
];
const MAX_PLACEMENT_TRIES: usize = 100;

pub fn altitude_scale(a: Altitude) -> f64 {
    match a {
        Altitude::Low => 1.0,
        Altitude::Medium => 0.6,
        Altitude::High => 0.35,
    }
}

pub fn view_shear(v: View) -> f64 {
    match v {
        View::Front => 0.0,
        View::Side => 0.25,
        View::Bird => 0.5,
    }
}

/// Vertical squash of the top-down view.
const BIRD_FLATTEN: f64 = 0.7;

/// (brightness, noise std)
pub fn weather_light(w: Weather) -> (f64, f64) {
    match w {
        Weather::Day => (1.0, 0.01),
        Weather::Night => (0.35, 0.03),
        Weather::Foggy => (0.7, 0.01),
    }
}

/// Renders one scene. Pixels are quantised to multiples of 1/255 so a PNG
/// round trip is lossless.
pub fn generate_scene(spec: &SceneSpec) -> Result<ImageSample> {
    let (h, w) = spec.canvas;
    if h < 64 || w < 64 {
        return Err(Error::Invalid(format!("canvas {h}x{w} is smaller than 64x64")));
    }
    let mut rng = seed_all(spec.seed).rng("scene");
    let mut img = background(h, w, &mut rng);

    let scale = altitude_scale(spec.domain.altitude);
    let shear = view_shear(spec.domain.view);
    let mut boxes: Vec<GtBox> = Vec::new();
    for _ in 0..spec.object_count {
        let (bw0, bh0, category) = VEHICLES[rng.random_range(0..VEHICLES.len())];
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        let (mut bw, mut bh) = (bw0 * scale, bh0 * scale);
        if rng.random_bool(0.5) {
            std::mem::swap(&mut bw, &mut bh);
        }
        if spec.domain.view == View::Bird {
            bh *= BIRD_FLATTEN;
        }
        let extent_w = bw + shear * bh;
        if extent_w > w as f64 || bh > h as f64 {
            continue;
        }
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x0 = rng.random_range(0.0..=(w as f64 - extent_w));
            let y0 = rng.random_range(0.0..=(h as f64 - bh));
            let pixels = rasterize(x0, y0, bw, bh, shear, w, h);
            let Some(bbox) = pixel_bounds(&pixels) else {
                continue;
            };
            let margin = BBox::new(bbox.x - 1.0, bbox.y - 1.0, bbox.w + 2.0, bbox.h + 2.0);
            if boxes.iter().any(|b| b.bbox.intersection(&margin) > 0.0) {
                continue;
            }
            for &(px, py) in &pixels {
                for c in 0..3 {
                    img[(c * h + py) * w + px] = color[c];
                }
            }
            boxes.push(GtBox { bbox, category });
            break;
        }
    }

    apply_weather(&mut img, h, w, spec.domain.weather, &mut rng);
    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(ImageSample {
        id: format!("scene_{:016x}", spec.seed),
        image: Tensor::from_vec(&[3, h, w], img)?,
        boxes,
        ignore_regions: Vec::new(),
        domain: spec.domain,
    })
}

fn background(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let base = [0.42, 0.46, 0.36];
    let (fx, fy) = (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let wave = 0.06 * (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            let grain = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                img[(c * h + y) * w + x] = base[c] + wave + grain;
            }
        }
    }
    img
}

/// Pixels whose centres fall inside the sheared rectangle with top-left
/// (x0, y0).
fn rasterize(x0: f64, y0: f64, bw: f64, bh: f64, shear: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    let y_end = ((y0 + bh).ceil() as usize).min(h);
    for py in (y0.floor() as usize)..y_end {
        let cy = py as f64 + 0.5;
        if cy < y0 || cy >= y0 + bh {
            continue;
        }
        let left = x0 + shear * (cy - y0);
        let x_end = ((left + bw).ceil() as usize).min(w);
        for px in (left.floor().max(0.0) as usize)..x_end {
            let cx = px as f64 + 0.5;
            if cx >= left && cx < left + bw {
                pixels.push((px, py));
            }
        }
    }
    pixels
}

fn pixel_bounds(pixels: &[(usize, usize)]) -> Option<BBox> {
    let x0 = pixels.iter().map(|p| p.0).min()?;
    let x1 = pixels.iter().map(|p| p.0).max()?;
    let y0 = pixels.iter().map(|p| p.1).min()?;
    let y1 = pixels.iter().map(|p| p.1).max()?;
    Some(BBox::new(
        x0 as f64,
        y0 as f64,
        (x1 - x0 + 1) as f64,
        (y1 - y0 + 1) as f64,
    ))
}

fn apply_weather(img: &mut [f64], h: usize, w: usize, weather: Weather, rng: &mut Rng) {
    let (brightness, sigma) = weather_light(weather);
    let noise = Normal::new(0.0, sigma).expect("positive std");
    let (phase_x, phase_y) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    for y in 0..h {
        for x in 0..w {
            let haze = if weather == Weather::Foggy {
                0.45 + 0.15 * (0.05 * x as f64 + phase_x).sin() * (0.04 * y as f64 + phase_y).cos()
            } else {
                0.0
            };
            for c in 0..3 {
                let v = &mut img[(c * h + y) * w + x];
                let hazed = (1.0 - haze) * *v + haze * 0.9;
                *v = brightness * hazed + noise.sample(rng);
            }
        }
    }
}

/// Builds a synthetic index with `per_domain` scenes for each listed domain.
pub fn synthetic_index(
    domains: &[DomainLabel],
    per_domain: usize,
    seed: u64,
    canvas: usize,
    split: Split,
) -> DatasetIndex {
    let ctx = seed_all(seed);
    let mut entries = Vec::with_capacity(domains.len() * per_domain);
    for d in domains {
        let stream = format!("{split}/{d}");
        for i in 0..per_domain {
            let mut rng = ctx.rng_indexed(&stream, i as u64);
            let spec = SceneSpec {
                domain: *d,
                object_count: rng.random_range(2..=6),
                canvas: (canvas, canvas),
                seed: rng.random(),
            };
            entries.push(IndexEntry {
                id: format!(
                    "{split}_{}-{}-{}_{i:04}",
                    d.altitude, d.view, d.weather
                ),
                domain: *d,
                source: SampleSource::Synthetic(spec),
            });
        }
    }
    DatasetIndex {
        entries,
        categories: CategorySet::synthetic(),
        split,
    }
}

/// Synthetic train and held-out indices over disjoint domain sets.
pub fn make_domain_split(
    train: &[DomainLabel],
    heldout: &[DomainLabel],
    per_domain: usize,
    seed: u64,
    canvas: usize,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Invalid("domain sets must be non-empty".into()));
    }
    let overlap: Vec<String> = train
        .iter()
        .filter(|d| heldout.contains(d))
        .map(ToString::to_string)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Invalid(format!(
            "train and held-out domains overlap: {}",
            overlap.join("; ")
        )));
    }
    let dedup = |d: &[DomainLabel]| d.iter().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>();
    Ok((
        synthetic_index(&dedup(train), per_domain, seed, canvas, Split::Train),
        synthetic_index(&dedup(heldout), per_domain, seed, canvas, Split::Heldout),
    ))
}

/// Writes samples in the VisDrone layout. Boxes are rounded to whole
/// pixels.
pub fn write_dataset(samples: &[ImageSample], root: &Path) -> Result<()> {
    let images = root.join("images");
    let anns = root.join("annotations");
    for dir in [&images, &anns] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        save_png(&s.image, &images.join(format!("{}.png", s.id)))?;
        let record = |b: &BBox, category: u32| VisDroneRecord {
            left: b.x.round() as i64,
            top: b.y.round() as i64,
            width: b.w.round() as i64,
            height: b.h.round() as i64,
            score: i64::from(category != IGNORED_REGION),
            category,
            truncation: 0,
            occlusion: 0,
        };
        let mut records: Vec<VisDroneRecord> =
            s.boxes.iter().map(|b| record(&b.bbox, b.category)).collect();
        records.extend(s.ignore_regions.iter().map(|b| record(b, IGNORED_REGION)));
        let path = anns.join(format!("{}.txt", s.id));
        fs::write(&path, format_annotations(&records)).map_err(|e| Error::io(&path, e))
    })?;
    let meta = root.join(METADATA_FILE);
    let text = format_metadata(samples.iter().map(|s| (s.id.as_str(), s.domain)));
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dl(s: &str) -> DomainLabel {
        s.parse().unwrap()
    }

    #[test]
    fn parser_examples() {
        let r = parse_visdrone_line("684,8,273,116,0,0,0,0", 1).unwrap();
        assert_eq!((r.left, r.top, r.width, r.height), (684, 8, 273, 116));
        assert!(r.is_ignored_region() && r.is_excluded());
        let r = parse_visdrone_line("10,10,5,5,1,4,0,0", 1).unwrap();
        assert_eq!(r.category, 4);
        assert!(!r.is_excluded());
        let e = parse_visdrone_line("1,2,3", 7).unwrap_err().to_string();
        assert!(e.contains("expected 8 fields, got 3") && e.contains('7'), "{e}");
        assert!(parse_visdrone_line("1,2,3,4,5,x,0,0", 2).is_err());
        assert!(parse_visdrone_line("1,2,3,4,5,12,0,0", 2).is_err());
        assert!(parse_visdrone_line("1,2,3,4,5,11,0,0", 2).unwrap().is_excluded());
    }

    #[test]
    fn metadata_rejects_unknown_words() {
        let e = parse_metadata("a,low,front,day\nb,low,front,rainy\n").unwrap_err();
        assert!(e.to_string().contains("rainy"));
    }

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let spec = SceneSpec {
            domain: dl("medium,side,night"),
            object_count: 6,
            canvas: (64, 64),
            seed: 9,
        };
        let a = generate_scene(&spec).unwrap();
        assert_eq!(a, generate_scene(&spec).unwrap());
        assert!(!a.boxes.is_empty());
        a.validate(&CategorySet::synthetic()).unwrap();
        let empty = generate_scene(&SceneSpec { object_count: 0, ..spec }).unwrap();
        assert!(empty.boxes.is_empty());
        assert!(generate_scene(&SceneSpec { canvas: (32, 64), ..spec }).is_err());
    }

    #[test]
    fn altitude_shrinks_boxes() {
        let mean_area = |alt: &str| {
            let mut total = 0.0;
            let mut n = 0;
            for seed in 0..100 {
                let s = generate_scene(&SceneSpec {
                    domain: dl(&format!("{alt},front,day")),
                    object_count: 4,
                    canvas: (128, 128),
                    seed,
                })
                .unwrap();
                total += s.boxes.iter().map(|b| b.bbox.area()).sum::<f64>();
                n += s.boxes.len();
            }
            total / n as f64
        };
        let ratio = mean_area("high") / mean_area("low");
        assert!((ratio - 0.1225).abs() < 0.1225 * 0.1, "ratio {ratio}");
    }

    #[test]
    fn domain_split_counts_and_disjointness() {
        let train = [dl("low,front,day"), dl("high,bird,day")];
        let held = [dl("medium,side,night")];
        let (a, b) = make_domain_split(&train, &held, 50, 3, 64).unwrap();
        assert_eq!((a.len(), b.len()), (100, 50));
        assert!(a.domains().is_disjoint(&b.domains()));
        assert!(a.domain_counts().values().all(|&c| c == 50));
        assert_eq!((a, b), make_domain_split(&train, &held, 50, 3, 64).unwrap());
        assert!(make_domain_split(&train, &train[..1], 5, 3, 64).is_err());
    }

    #[test]
    fn disk_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let idx = synthetic_index(&[dl("low,side,foggy")], 3, 1, 64, Split::Train);
        let samples = idx.load_all(64, 3).unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let loaded = load_visdrone(
            dir.path(),
            None,
            dl("medium,front,day"),
            CategorySet::synthetic(),
            Split::Train,
        )
        .unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.load_all(64, 3).unwrap(), samples);
    }

    #[test]
    fn missing_annotation_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let idx = synthetic_index(&[dl("low,side,day")], 3, 1, 64, Split::Train);
        let samples = idx.load_all(64, 3).unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let victim = dir.path().join("annotations").join(format!("{}.txt", samples[1].id));
        fs::remove_file(victim).unwrap();
        let e = load_visdrone(dir.path(), None, dl("low,side,day"), CategorySet::synthetic(), Split::Train)
            .unwrap_err();
        assert!(e.to_string().contains(&samples[1].id));
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(v in proptest::array::uniform8(0i64..5000), cat in 0u32..=11) {
            let line = format!("{},{},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], cat, v[6], v[7]);
            let r = parse_visdrone_line(&line, 1).unwrap();
            prop_assert_eq!(r.to_string(), line);
        }
    }
}

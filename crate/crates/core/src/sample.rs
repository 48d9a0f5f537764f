//! Images with ground truth, the unit every module passes around.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::DomainLabel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// VisDrone category id of ignored regions.
pub const IGNORED_REGION: u32 = 0;
/// VisDrone category id of "others".
pub const OTHERS: u32 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub category: u32,
}

/// Ordered object categories, identified by their dataset ids. The position
/// in the list is the detector's class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    entries: Vec<(u32, String)>,
}

impl CategorySet {
    pub fn new(entries: Vec<(u32, String)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("category set is empty".into()));
        }
        for (i, (id, _)) in entries.iter().enumerate() {
            if *id == IGNORED_REGION {
                return Err(Error::Invalid("category 0 is reserved for ignored regions".into()));
            }
            if entries[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::Invalid(format!("duplicate category id {id}")));
            }
        }
        Ok(Self { entries })
    }

    /// The ten evaluated VisDrone-DET categories.
    pub fn visdrone() -> Self {
        let names = [
            "pedestrian",
            "people",
            "bicycle",
            "car",
            "van",
            "truck",
            "tricycle",
            "awning-tricycle",
            "bus",
            "motor",
        ];
        Self {
            entries: names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u32 + 1, n.to_string()))
                .collect(),
        }
    }

    /// The vehicle categories drawn by the synthetic scene generator.
    pub fn synthetic() -> Self {
        Self {
            entries: vec![
                (4, "car".to_string()),
                (5, "van".to_string()),
                (6, "truck".to_string()),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.entries.iter().position(|(c, _)| *c == id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.index_of(id).is_some()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, n)| n.as_str())
    }

    pub fn entries(&self) -> &[(u32, String)] {
        &self.entries
    }
}

/// An image tensor (channels, height, width) with values in [0, 1], its
/// ground-truth boxes and its shooting condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<GtBox>,
    /// Regions excluded from training targets and from evaluation.
    pub ignore_regions: Vec<BBox>,
    pub domain: DomainLabel,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Checks the image range and that every box is inside the image, has
    /// positive size and a category from `categories`.
    pub fn validate(&self, categories: &CategorySet) -> Result<()> {
        let (_, h, w) = self.image.dims3()?;
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("{}: pixel values outside [0, 1]", self.id)));
        }
        for b in &self.boxes {
            if !b.bbox.is_valid() || !b.bbox.within(w as f64, h as f64) {
                return Err(Error::Dataset(format!(
                    "{}: box {:?} outside {w}x{h} image or empty",
                    self.id, b.bbox
                )));
            }
            if !categories.contains(b.category) {
                return Err(Error::Dataset(format!(
                    "{}: category {} not in the configured set",
                    self.id, b.category
                )));
            }
        }
        Ok(())
    }
}

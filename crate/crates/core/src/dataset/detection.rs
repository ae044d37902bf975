//! Box-annotated detection datasets.
//!
//! On disk boxes are `[x, y, width, height]`; in memory they are corner form.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in pixel corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [
            self.x_min,
            self.y_min,
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        ]
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: i64,
    pub name: String,
}

/// Boxes for one image. `scores` is present exactly when the record holds
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub scores: Option<Vec<f64>>,
}

impl DetectionRecord {
    pub fn ground_truth(image_id: impl Into<String>, boxes: Vec<BBox>, labels: Vec<usize>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes,
            labels,
            scores: None,
        }
    }

    pub fn prediction(
        image_id: impl Into<String>,
        boxes: Vec<BBox>,
        labels: Vec<usize>,
        scores: Vec<f64>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            boxes,
            labels,
            scores: Some(scores),
        }
    }

    pub fn empty(image_id: impl Into<String>, prediction: bool) -> Self {
        Self {
            image_id: image_id.into(),
            boxes: vec![],
            labels: vec![],
            scores: prediction.then(Vec::new),
        }
    }

    pub fn is_prediction(&self) -> bool {
        self.scores.is_some()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.boxes.len() {
            return Err(Error::InvalidAnnotations(format!(
                "image {}: {} boxes but {} labels",
                self.image_id,
                self.boxes.len(),
                self.labels.len()
            )));
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.boxes.len() {
                return Err(Error::InvalidAnnotations(format!(
                    "image {}: {} boxes but {} scores",
                    self.image_id,
                    self.boxes.len(),
                    scores.len()
                )));
            }
            if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::InvalidAnnotations(format!(
                    "image {}: score {s} outside [0, 1]",
                    self.image_id
                )));
            }
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidAnnotations(format!(
                "image {}: label {l} outside vocabulary of {num_classes}",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// A whole annotation (or prediction) file in memory.
///
/// `records[i]` belongs to `images[i]`; labels index into `categories`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub categories: Vec<Category>,
    pub records: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum JsonId {
    Int(i64),
    Str(String),
}

impl JsonId {
    fn key(&self) -> String {
        match self {
            JsonId::Int(i) => i.to_string(),
            JsonId::Str(s) => s.clone(),
        }
    }

    fn from_key(key: &str) -> Self {
        match key.parse::<i64>() {
            Ok(i) if i.to_string() == key => JsonId::Int(i),
            _ => JsonId::Str(key.to_string()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonImage {
    id: JsonId,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonAnnotation {
    image_id: JsonId,
    bbox: [f64; 4],
    category_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonFile {
    images: Vec<JsonImage>,
    annotations: Vec<JsonAnnotation>,
    categories: Vec<Category>,
}

impl AnnotationSet {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn is_prediction(&self) -> bool {
        self.records.iter().any(|r| r.is_prediction())
    }

    pub fn total_boxes(&self) -> usize {
        self.records.iter().map(|r| r.len()).sum()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    /// Keeps only the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            categories: self.categories.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Parses the JSON annotation format. Boxes are clipped to their image;
    /// a box that is empty after clipping is an error. Either every
    /// annotation carries a score (a prediction file) or none does.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: JsonFile = serde_json::from_str(text)?;
        let mut categories = file.categories;
        categories.sort_by_key(|c| c.id);
        if categories.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidAnnotations("duplicate category id".into()));
        }
        let class_of: HashMap<i64, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();

        let scored = file.annotations.iter().filter(|a| a.score.is_some()).count();
        let prediction = scored > 0;
        if prediction && scored != file.annotations.len() {
            return Err(Error::InvalidAnnotations(format!(
                "{scored} of {} annotations carry a score; expected all or none",
                file.annotations.len()
            )));
        }

        let mut images = Vec::with_capacity(file.images.len());
        let mut position: HashMap<String, usize> = HashMap::new();
        for img in file.images {
            let id = img.id.key();
            if position.insert(id.clone(), images.len()).is_some() {
                return Err(Error::InvalidAnnotations(format!("duplicate image id {id}")));
            }
            images.push(ImageInfo {
                id,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
            });
        }
        let mut records: Vec<DetectionRecord> = images
            .iter()
            .map(|i| DetectionRecord::empty(i.id.clone(), prediction))
            .collect();
        for ann in file.annotations {
            let key = ann.image_id.key();
            let Some(&i) = position.get(&key) else {
                return Err(Error::InvalidAnnotations(format!(
                    "annotation refers to unknown image {key}"
                )));
            };
            let Some(&label) = class_of.get(&ann.category_id) else {
                return Err(Error::InvalidAnnotations(format!(
                    "annotation refers to unknown category {}",
                    ann.category_id
                )));
            };
            let [x, y, w, h] = ann.bbox;
            let info = &images[i];
            let bbox = BBox::from_xywh(x, y, w, h).clip(info.width as f64, info.height as f64);
            if !bbox.is_valid() {
                return Err(Error::InvalidAnnotations(format!(
                    "image {key}: box {:?} is empty after clipping to {}x{}",
                    ann.bbox, info.width, info.height
                )));
            }
            let rec = &mut records[i];
            rec.boxes.push(bbox);
            rec.labels.push(label);
            if let (Some(scores), Some(s)) = (rec.scores.as_mut(), ann.score) {
                scores.push(s);
            }
        }
        let set = Self {
            images,
            categories,
            records,
        };
        for r in &set.records {
            r.validate(set.num_classes())?;
        }
        Ok(set)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = JsonFile {
            images: self
                .images
                .iter()
                .map(|i| JsonImage {
                    id: JsonId::from_key(&i.id),
                    file_name: i.file_name.clone(),
                    width: i.width,
                    height: i.height,
                })
                .collect(),
            annotations: self
                .records
                .iter()
                .flat_map(|r| {
                    (0..r.boxes.len()).map(move |k| JsonAnnotation {
                        image_id: JsonId::from_key(&r.image_id),
                        bbox: r.boxes[k].to_xywh(),
                        category_id: self.categories[r.labels[k]].id,
                        score: r.scores.as_ref().map(|s| s[k]),
                    })
                })
                .collect(),
            categories: self.categories.clone(),
        };
        serde_json::to_string_pretty(&file).expect("annotation file serializes")
    }

    /// Records keyed by image id.
    pub fn by_image(&self) -> BTreeMap<&str, &DetectionRecord> {
        self.records
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect()
    }
}

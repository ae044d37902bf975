//! Dataset statistics: class pixel shares, annotation shares, resolution.

use serde::Serialize;

use super::detection::DetectionRecord;
use super::mask::ClassMap;
use super::SegmentationSource;
use crate::{Error, Result};

/// Exact per-class pixel tallies. Merging two accumulators is elementwise
/// addition, so shards can be counted independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PixelStats {
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassShare {
    pub class: String,
    pub count: u64,
    pub proportion: f64,
}

impl PixelStats {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, map: &ClassMap) -> Result<()> {
        for &c in map.as_slice() {
            let Some(slot) = self.counts.get_mut(c as usize) else {
                return Err(Error::InvalidArgument(format!(
                    "class index {c} outside {} classes",
                    self.counts.len()
                )));
            };
            *slot += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PixelStats) {
        assert_eq!(self.counts.len(), other.counts.len(), "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of each class; all zeros when nothing was counted.
    pub fn proportions(&self) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }

    pub fn shares(&self, names: &[String]) -> Vec<ClassShare> {
        self.proportions()
            .into_iter()
            .zip(&self.counts)
            .zip(names)
            .map(|((proportion, &count), name)| ClassShare {
                class: name.clone(),
                count,
                proportion,
            })
            .collect()
    }
}

/// Tallies every decoded mask of a segmentation dataset.
pub fn class_pixel_stats<S: SegmentationSource + ?Sized>(dataset: &S) -> Result<PixelStats> {
    let mut stats = PixelStats::new(dataset.num_classes());
    for i in 0..dataset.len() {
        stats.add(&dataset.load(i)?.mask)?;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl AnnotationStats {
    /// Percentage of all boxes per class (0 when there are no boxes).
    pub fn percentages(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| {
                if self.total == 0 {
                    0.0
                } else {
                    100.0 * c as f64 / self.total as f64
                }
            })
            .collect()
    }
}

pub fn annotation_class_stats(records: &[DetectionRecord], num_classes: usize) -> Result<AnnotationStats> {
    let mut counts = vec![0u64; num_classes];
    for r in records {
        for &l in &r.labels {
            let Some(slot) = counts.get_mut(l) else {
                return Err(Error::InvalidArgument(format!(
                    "label {l} outside {num_classes} classes"
                )));
            };
            *slot += 1;
        }
    }
    let total = counts.iter().sum();
    Ok(AnnotationStats { counts, total })
}

/// Mean ground resolution (meters per pixel) of a dataset whose pixels are
/// spread uniformly over `[min_res, max_res]`.
pub fn resolution_profile(min_res: f64, max_res: f64) -> Result<f64> {
    if !(min_res > 0.0 && max_res > 0.0) || !min_res.is_finite() || !max_res.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "resolutions must be positive, got ({min_res}, {max_res})"
        )));
    }
    if min_res > max_res {
        return Err(Error::InvalidArgument(format!(
            "minimum resolution {min_res} exceeds maximum {max_res}"
        )));
    }
    Ok((min_res + max_res) / 2.0)
}

//! Dataset ingestion: classification folders, color-coded segmentation
//! pairs, box annotations, splits and statistics.
//!
//! Loaders are immutable after construction; the source traits take `&self`
//! and are `Sync`, so one dataset can feed several reader threads.

pub mod classification;
pub mod detection;
pub mod mask;
pub mod segmentation;
pub mod split;
pub mod stats;
pub mod synthetic;

use std::path::{Path, PathBuf};

use image::RgbImage;

pub use classification::{load_classification_folder, ClassificationDataset, RejectsReport};
pub use detection::{AnnotationSet, BBox, Category, DetectionRecord, ImageInfo};
pub use mask::{decode_mask, decode_mask_with, encode_mask, ClassMap, ColorCodeTable, ColorEntry, ColorMatching};
pub use segmentation::{SegmentationDataset, SegmentationPair};
pub use split::{deterministic_split, explicit_split, Split, SplitSpec};
pub use stats::{annotation_class_stats, class_pixel_stats, resolution_profile, PixelStats};

use crate::{Error, Result};

/// Images with one class label each.
pub trait LabeledImages: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Label without decoding the image.
    fn label(&self, index: usize) -> usize;
    fn load(&self, index: usize) -> Result<(RgbImage, usize)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images without labels, e.g. for self-supervised pre-training.
pub trait UnlabeledImages: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<RgbImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait SegmentationSource: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn load(&self, index: usize) -> Result<SegmentationPair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory labeled images.
#[derive(Debug, Clone)]
pub struct LabeledVec {
    pub items: Vec<(RgbImage, usize)>,
    pub num_classes: usize,
}

impl LabeledImages for LabeledVec {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn label(&self, index: usize) -> usize {
        self.items[index].1
    }

    fn load(&self, index: usize) -> Result<(RgbImage, usize)> {
        Ok(self.items[index].clone())
    }
}

impl UnlabeledImages for Vec<RgbImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<RgbImage> {
        Ok(self[index].clone())
    }
}

/// In-memory segmentation pairs.
#[derive(Debug, Clone)]
pub struct SegmentationVec {
    pub pairs: Vec<SegmentationPair>,
    pub num_classes: usize,
}

impl SegmentationSource for SegmentationVec {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn load(&self, index: usize) -> Result<SegmentationPair> {
        Ok(self.pairs[index].clone())
    }
}

/// A view onto a subset of another source, in the given index order.
pub struct Subset<'a, S: ?Sized> {
    pub source: &'a S,
    pub indices: &'a [usize],
}

impl<S: LabeledImages + ?Sized> LabeledImages for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    fn label(&self, index: usize) -> usize {
        self.source.label(self.indices[index])
    }

    fn load(&self, index: usize) -> Result<(RgbImage, usize)> {
        self.source.load(self.indices[index])
    }
}

impl<S: SegmentationSource + ?Sized> SegmentationSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    fn load(&self, index: usize) -> Result<SegmentationPair> {
        self.source.load(self.indices[index])
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Directory entries sorted by path.
pub(crate) fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

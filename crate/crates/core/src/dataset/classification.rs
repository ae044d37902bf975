//! Scene-classification datasets stored as `<root>/<class_name>/<image>`.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;

use super::{is_image_file, read_dir_sorted, LabeledImages, UnlabeledImages};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationDataset {
    root: PathBuf,
    class_names: Vec<String>,
    samples: Vec<(PathBuf, usize)>,
}

/// Image files that were found but could not be read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RejectsReport {
    pub rejected: Vec<(PathBuf, String)>,
}

impl RejectsReport {
    pub fn is_empty(&self) -> bool {
        self.rejected.is_empty()
    }
}

impl ClassificationDataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn samples(&self) -> &[(PathBuf, usize)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples per class, in class order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for (_, c) in &self.samples {
            counts[*c] += 1;
        }
        counts
    }
}

/// Scans a class-per-folder tree.
///
/// Classes are the immediate subdirectories in lexicographic order; samples
/// are ordered by path. Only the image header is read here, so a file with a
/// broken header lands in the rejects report while a file that is corrupt
/// further in surfaces as an error when it is loaded.
pub fn load_classification_folder(root: &Path) -> Result<(ClassificationDataset, RejectsReport)> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut rejects = RejectsReport::default();
    for class_dir in read_dir_sorted(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class_name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let class_index = class_names.len();
        let mut n = 0usize;
        for file in read_dir_sorted(&class_dir)? {
            if !file.is_file() || !is_image_file(&file) {
                continue;
            }
            match image::image_dimensions(&file) {
                Ok(_) => {
                    samples.push((file, class_index));
                    n += 1;
                }
                Err(e) => rejects.rejected.push((file, e.to_string())),
            }
        }
        if n == 0 {
            return Err(Error::EmptyClass { class: class_name });
        }
        class_names.push(class_name);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok((
        ClassificationDataset {
            root: root.to_path_buf(),
            class_names,
            samples,
        },
        rejects,
    ))
}

pub(crate) fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8())
}

impl LabeledImages for ClassificationDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn label(&self, index: usize) -> usize {
        self.samples[index].1
    }

    fn load(&self, index: usize) -> Result<(RgbImage, usize)> {
        let (path, class) = &self.samples[index];
        Ok((load_rgb(path)?, *class))
    }
}

impl UnlabeledImages for ClassificationDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn load(&self, index: usize) -> Result<RgbImage> {
        load_rgb(&self.samples[index].0)
    }
}

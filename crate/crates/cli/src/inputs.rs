//! Dataset and checkpoint inputs named by a run configuration.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use geopretrain_core::checkpoint::Checkpoint;
use geopretrain_core::dataset::synthetic::{
    box_scenes, class_color, color_separable_segmentation, separable_classification, textured_images,
};
use geopretrain_core::dataset::{
    deterministic_split, load_classification_folder, AnnotationSet, ColorCodeTable, ColorEntry, ColorMatching,
    LabeledVec, SegmentationDataset, SegmentationVec, SplitSpec,
};
use geopretrain_nn::detection::DetSample;

use crate::config::{DatasetKind, DatasetSection};
use crate::{Failure, Outcome};

/// Directory for decoded-mask caches.
pub const CACHE_ENV: &str = "GEOPRETRAIN_CACHE";

fn missing(what: &str, path: &Path) -> Failure {
    Failure::Validation(anyhow!("{what} not found: {}", path.display()))
}

/// Loads a checkpoint named by the config; a missing file is a validation
/// failure that names the path.
pub fn checkpoint(path: &Path) -> Outcome<Checkpoint> {
    if !path.is_file() {
        return Err(missing("checkpoint", path));
    }
    Checkpoint::load(path).map_err(|e| Failure::Validation(anyhow!("{}: {e}", path.display())))
}

/// Checks that every input path named by the dataset section exists.
pub fn check_paths(ds: &DatasetSection) -> Outcome {
    if ds.kind == DatasetKind::Synthetic {
        return Ok(());
    }
    if let Some(root) = &ds.root {
        if !root.is_dir() {
            return Err(missing("dataset root", root));
        }
    }
    for p in [&ds.annotations, &ds.eval_annotations, &ds.color_table].into_iter().flatten() {
        if !p.is_file() {
            return Err(missing("dataset file", p));
        }
    }
    if ds.kind == DatasetKind::Detection && ds.annotations.is_none() {
        return Err(Failure::Validation(anyhow!("dataset.annotations is required for detection data")));
    }
    Ok(())
}

pub fn color_table(ds: &DatasetSection) -> Outcome<ColorCodeTable> {
    match (&ds.color_table, ds.kind) {
        (Some(p), _) => ColorCodeTable::from_json_file(p).map_err(|e| Failure::Validation(e.into())),
        (None, DatasetKind::Synthetic) => {
            let k = ds.synthetic.classes;
            let entries = (0..k)
                .map(|i| ColorEntry {
                    name: format!("class_{i}"),
                    rgb: class_color(i, k),
                    unknown: i == 0,
                })
                .collect();
            ColorCodeTable::new(entries).map_err(|e| Failure::Validation(e.into()))
        }
        (None, _) => Ok(ColorCodeTable::deepglobe()),
    }
}

pub enum Labeled {
    Folder(geopretrain_core::dataset::ClassificationDataset),
    Memory(LabeledVec),
}

impl Labeled {
    pub fn as_labeled(&self) -> &dyn geopretrain_core::dataset::LabeledImages {
        match self {
            Labeled::Folder(d) => d,
            Labeled::Memory(d) => d,
        }
    }
}

pub fn labeled(ds: &DatasetSection, seed: u64) -> Outcome<(Labeled, Vec<String>)> {
    match ds.kind {
        DatasetKind::Folder => {
            let root = ds.root.as_deref().expect("validated");
            let (d, rejects) = load_classification_folder(root)?;
            let notes = rejects
                .rejected
                .iter()
                .map(|(p, why)| format!("skipped {}: {why}", p.display()))
                .collect();
            Ok((Labeled::Folder(d), notes))
        }
        _ => {
            let s = &ds.synthetic;
            let per_class = s.count.div_ceil(s.classes.max(1));
            Ok((
                Labeled::Memory(separable_classification(s.classes, per_class, s.size, seed)),
                Vec::new(),
            ))
        }
    }
}

pub enum Unlabeled {
    Folder(geopretrain_core::dataset::ClassificationDataset),
    Memory(Vec<image::RgbImage>),
}

impl Unlabeled {
    pub fn as_unlabeled(&self) -> &dyn geopretrain_core::dataset::UnlabeledImages {
        match self {
            Unlabeled::Folder(d) => d,
            Unlabeled::Memory(d) => d,
        }
    }
}

pub fn unlabeled(ds: &DatasetSection, seed: u64) -> Outcome<(Unlabeled, Vec<String>)> {
    match ds.kind {
        DatasetKind::Folder => {
            let (Labeled::Folder(d), notes) = labeled(ds, seed)? else { unreachable!() };
            Ok((Unlabeled::Folder(d), notes))
        }
        _ => Ok((
            Unlabeled::Memory(textured_images(ds.synthetic.count, ds.synthetic.size, seed)),
            Vec::new(),
        )),
    }
}

pub enum Segmentation {
    Folder(SegmentationDataset),
    Memory(SegmentationVec),
}

impl Segmentation {
    pub fn as_source(&self) -> &dyn geopretrain_core::dataset::SegmentationSource {
        match self {
            Segmentation::Folder(d) => d,
            Segmentation::Memory(d) => d,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            Segmentation::Folder(d) => d.ids(),
            Segmentation::Memory(d) => d.pairs.iter().map(|p| p.source_id.clone()).collect(),
        }
    }
}

pub fn segmentation(ds: &DatasetSection, table: &ColorCodeTable, seed: u64) -> Outcome<Segmentation> {
    match ds.kind {
        DatasetKind::Segmentation => {
            let root = ds.root.as_deref().expect("validated");
            let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
            let matching = if ds.lenient_colors { ColorMatching::Lenient } else { ColorMatching::Exact };
            Ok(Segmentation::Folder(
                SegmentationDataset::open(root, table.clone())?
                    .with_matching(matching)
                    .with_cache_dir(cache),
            ))
        }
        _ => {
            let s = &ds.synthetic;
            Ok(Segmentation::Memory(color_separable_segmentation(s.count, s.size, s.classes, s.cell, seed)))
        }
    }
}

/// Training and evaluation samples plus class names.
pub struct DetectionData {
    pub train: Vec<DetSample>,
    pub eval: Vec<DetSample>,
    pub class_names: Vec<String>,
}

fn samples_of(set: &AnnotationSet, root: &Path) -> Vec<DetSample> {
    set.images
        .iter()
        .zip(&set.records)
        .map(|(info, r)| DetSample {
            image_id: info.id.clone(),
            path: Some(root.join(&info.file_name)),
            width: info.width,
            height: info.height,
            gt: r.clone(),
        })
        .collect()
}

/// Detection data. Synthetic scenes are written as PNGs under `scratch` so
/// that file-reading backends can use them.
pub fn detection(ds: &DatasetSection, eval_fraction: f64, seed: u64, scratch: &Path) -> Outcome<DetectionData> {
    let split_seed = geopretrain_core::seed::derive(seed, "det-split");
    let (all, eval, names) = match ds.kind {
        DatasetKind::Detection => {
            let root = ds.root.as_deref().expect("validated");
            let train = AnnotationSet::from_json_file(ds.annotations.as_deref().expect("checked"))?;
            let names = train.class_names();
            match &ds.eval_annotations {
                Some(p) => {
                    let eval = AnnotationSet::from_json_file(p)?;
                    if eval.class_names() != names {
                        return Err(Failure::Validation(anyhow!(
                            "train and eval annotations list different categories"
                        )));
                    }
                    (samples_of(&train, root), Some(samples_of(&eval, root)), names)
                }
                None => (samples_of(&train, root), None, names),
            }
        }
        _ => {
            let s = &ds.synthetic;
            std::fs::create_dir_all(scratch)?;
            let mut samples = Vec::with_capacity(s.count);
            for (img, gt) in box_scenes(s.count, s.size, s.classes, seed) {
                let path = scratch.join(format!("{}.png", gt.image_id));
                img.save(&path).map_err(Failure::runtime)?;
                samples.push(DetSample {
                    image_id: gt.image_id.clone(),
                    path: Some(path),
                    width: s.size,
                    height: s.size,
                    gt,
                });
            }
            (samples, None, (0..s.classes).map(|k| format!("class_{k}")).collect())
        }
    };
    let (train, eval) = match eval {
        Some(e) => (all, e),
        None => {
            let split = deterministic_split(
                all.len(),
                SplitSpec {
                    fraction: 1.0 - eval_fraction,
                    seed: split_seed,
                },
            )?;
            (
                split.train.iter().map(|&i| all[i].clone()).collect(),
                split.eval.iter().map(|&i| all[i].clone()).collect(),
            )
        }
    };
    if train.is_empty() || eval.is_empty() {
        return Err(Failure::Validation(anyhow!(
            "detection data leaves an empty train or eval partition"
        )));
    }
    Ok(DetectionData {
        train,
        eval,
        class_names: names,
    })
}

//! Paired satellite image / color-coded mask datasets.
//!
//! Layout: `<root>/<id>_sat.{jpg,png}` next to `<root>/<id>_mask.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use sha2::{Digest, Sha256};

use super::classification::load_rgb;
use super::mask::{decode_mask_with, ClassMap, ColorCodeTable, ColorMatching};
use super::{read_dir_sorted, SegmentationSource};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationPair {
    pub image: RgbImage,
    pub mask: ClassMap,
    pub source_id: String,
}

impl SegmentationPair {
    pub fn new(image: RgbImage, mask: ClassMap, source_id: impl Into<String>) -> Result<Self> {
        if image.dimensions() != mask.dims() {
            return Err(Error::ShapeMismatch(format!(
                "image is {:?} but mask is {:?}",
                image.dimensions(),
                mask.dims()
            )));
        }
        Ok(Self {
            image,
            mask,
            source_id: source_id.into(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationItem {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SegmentationDataset {
    root: PathBuf,
    items: Vec<SegmentationItem>,
    table: ColorCodeTable,
    matching: ColorMatching,
    cache_dir: Option<PathBuf>,
}

impl SegmentationDataset {
    /// Pairs `_sat` images with `_mask` files; an image or mask without its
    /// counterpart is an error. Items are ordered by id.
    pub fn open(root: &Path, table: ColorCodeTable) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingRoot(root.to_path_buf()));
        }
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
        for path in read_dir_sorted(root)? {
            if !path.is_file() {
                continue;
            }
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if let Some(id) = strip_any(&name, &["_sat.jpg", "_sat.jpeg", "_sat.png"]) {
                if images.insert(id.to_string(), path.clone()).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "image id `{id}` present in more than one format"
                    )));
                }
            } else if let Some(id) = strip_any(&name, &["_mask.png"]) {
                masks.insert(id.to_string(), path);
            }
        }
        let mut items = Vec::with_capacity(images.len());
        for (id, image_path) in images {
            let Some(mask_path) = masks.remove(&id) else {
                return Err(Error::UnpairedFile(image_path));
            };
            items.push(SegmentationItem {
                id,
                image_path,
                mask_path,
            });
        }
        if let Some((_, orphan)) = masks.into_iter().next() {
            return Err(Error::UnpairedFile(orphan));
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset(root.to_path_buf()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            items,
            table,
            matching: ColorMatching::Exact,
            cache_dir: None,
        })
    }

    pub fn with_matching(mut self, matching: ColorMatching) -> Self {
        self.matching = matching;
        self
    }

    /// Caches decoded class maps under `dir`, keyed by mask content and table.
    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn items(&self) -> &[SegmentationItem] {
        &self.items
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    pub fn table(&self) -> &ColorCodeTable {
        &self.table
    }

    pub fn load_mask(&self, index: usize) -> Result<ClassMap> {
        let item = &self.items[index];
        let bytes = std::fs::read(&item.mask_path).map_err(|e| Error::io(&item.mask_path, e))?;
        let cache_path = self.cache_dir.as_ref().map(|dir| {
            let mut h = Sha256::new();
            h.update(&bytes);
            h.update(self.table.to_json().as_bytes());
            h.update([self.matching as u8]);
            dir.join(format!("{}.classmap", hex::encode(&h.finalize()[..16])))
        });
        if let Some(map) = cache_path.as_deref().and_then(read_cached) {
            return Ok(map);
        }
        let rgb = image::load_from_memory(&bytes)
            .map_err(|e| Error::image(&item.mask_path, e))?
            .to_rgb8();
        let (map, report) =
            decode_mask_with(&rgb, &self.table, self.matching).map_err(|e| Error::MaskDecode {
                path: item.mask_path.clone(),
                source: Box::new(e),
            })?;
        if report.unmatched_pixels > 0 {
            log::warn!(
                "{}: {} pixels with unlisted colors mapped to the unknown class",
                item.mask_path.display(),
                report.unmatched_pixels
            );
        }
        if let Some(path) = cache_path {
            // Cache failures only cost a re-decode.
            let _ = write_cached(&path, &map);
        }
        Ok(map)
    }
}

fn strip_any<'a>(name: &'a str, suffixes: &[&str]) -> Option<&'a str> {
    suffixes.iter().find_map(|s| name.strip_suffix(s))
}

const CACHE_MAGIC: &[u8; 8] = b"GPCMAP01";

fn read_cached(path: &Path) -> Option<ClassMap> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return None;
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().ok()?);
    let h = u32::from_le_bytes(bytes[12..16].try_into().ok()?);
    ClassMap::new(w, h, bytes[16..].to_vec()).ok()
}

fn write_cached(path: &Path, map: &ClassMap) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(16 + map.as_slice().len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&map.width().to_le_bytes());
    bytes.extend_from_slice(&map.height().to_le_bytes());
    bytes.extend_from_slice(map.as_slice());
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

impl SegmentationSource for SegmentationDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn num_classes(&self) -> usize {
        self.table.len()
    }

    fn load(&self, index: usize) -> Result<SegmentationPair> {
        let item = &self.items[index];
        let image = load_rgb(&item.image_path)?;
        let mask = self.load_mask(index)?;
        SegmentationPair::new(image, mask, item.id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::mask::encode_mask;

    fn write_pair(dir: &Path, id: &str, class: u8) {
        let t = ColorCodeTable::deepglobe();
        RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]))
            .save(dir.join(format!("{id}_sat.png")))
            .unwrap();
        encode_mask(&ClassMap::filled(4, 4, class), &t)
            .unwrap()
            .save(dir.join(format!("{id}_mask.png")))
            .unwrap();
    }

    #[test]
    fn pairs_by_id_and_decodes() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "b", 2);
        write_pair(dir.path(), "a", 4);
        let ds = SegmentationDataset::open(dir.path(), ColorCodeTable::deepglobe()).unwrap();
        assert_eq!(ds.ids(), vec!["a", "b"]);
        let pair = ds.load(0).unwrap();
        assert_eq!(pair.mask, ClassMap::filled(4, 4, 4));
    }

    #[test]
    fn orphan_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 0);
        std::fs::copy(dir.path().join("a_mask.png"), dir.path().join("z_mask.png")).unwrap();
        assert!(matches!(
            SegmentationDataset::open(dir.path(), ColorCodeTable::deepglobe()),
            Err(Error::UnpairedFile(_))
        ));
    }

    #[test]
    fn cache_returns_identical_maps() {
        let dir = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 3);
        let ds = SegmentationDataset::open(dir.path(), ColorCodeTable::deepglobe())
            .unwrap()
            .with_cache_dir(Some(cache.path().to_path_buf()));
        let first = ds.load_mask(0).unwrap();
        assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 1);
        assert_eq!(ds.load_mask(0).unwrap(), first);
    }
}

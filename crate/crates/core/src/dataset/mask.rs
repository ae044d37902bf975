//! Color-coded segmentation masks.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMap {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::ShapeMismatch(format!(
                "class map of {width}x{height} needs {} values, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, class: u8) -> Self {
        Self {
            width,
            height,
            data: vec![class; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, class: u8) {
        self.data[y as usize * self.width as usize + x as usize] = class;
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }
}

/// One row of a color table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorEntry {
    pub name: String,
    pub rgb: [u8; 3],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unknown: bool,
}

/// Ordered mapping between class indices and mask colors.
///
/// Exactly one entry is the unknown/background class. In JSON form it is
/// either flagged with `"unknown": true` or, when no entry is flagged, named
/// `unknown` or `background` (case-insensitive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorCodeTable {
    entries: Vec<ColorEntry>,
    unknown: usize,
    lookup: HashMap<[u8; 3], u8>,
}

/// Outcome of a lenient decode: pixels whose color matched no entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeReport {
    pub unmatched_pixels: u64,
    pub unmatched_colors: Vec<([u8; 3], u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorMatching {
    #[default]
    Exact,
    /// Unmatched colors become the unknown class and are counted.
    Lenient,
}

impl ColorCodeTable {
    pub fn new(mut entries: Vec<ColorEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidColorTable("table has no entries".into()));
        }
        if entries.len() > u8::MAX as usize {
            return Err(Error::InvalidColorTable(format!(
                "at most 255 classes supported, got {}",
                entries.len()
            )));
        }
        let flagged: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.unknown)
            .map(|(i, _)| i)
            .collect();
        let unknown = match flagged.as_slice() {
            [i] => *i,
            [] => {
                let named: Vec<usize> = entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| {
                        let n = e.name.to_ascii_lowercase();
                        n == "unknown" || n == "background"
                    })
                    .map(|(i, _)| i)
                    .collect();
                match named.as_slice() {
                    [i] => *i,
                    [] => {
                        return Err(Error::InvalidColorTable(
                            "no entry is designated the unknown/background class".into(),
                        ))
                    }
                    _ => {
                        return Err(Error::InvalidColorTable(
                            "more than one entry is named unknown/background".into(),
                        ))
                    }
                }
            }
            _ => {
                return Err(Error::InvalidColorTable(
                    "more than one entry is flagged unknown".into(),
                ))
            }
        };
        for (i, e) in entries.iter_mut().enumerate() {
            e.unknown = i == unknown;
        }
        let mut lookup = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if let Some(prev) = lookup.insert(e.rgb, i as u8) {
                return Err(Error::InvalidColorTable(format!(
                    "color {:?} used by both `{}` and `{}`",
                    e.rgb, entries[prev as usize].name, e.name
                )));
            }
        }
        Ok(Self {
            entries,
            unknown,
            lookup,
        })
    }

    /// The DeepGlobe land-cover table, in its published class order.
    pub fn deepglobe() -> Self {
        let rows: [(&str, [u8; 3]); 7] = [
            ("Urban_land", [0, 255, 255]),
            ("Agriculture_land", [255, 255, 0]),
            ("Rangeland", [255, 0, 255]),
            ("Forest_land", [0, 255, 0]),
            ("Water", [0, 0, 255]),
            ("Barren-land", [255, 255, 255]),
            ("Unknown", [0, 0, 0]),
        ];
        let entries = rows
            .iter()
            .map(|(name, rgb)| ColorEntry {
                name: name.to_string(),
                rgb: *rgb,
                unknown: false,
            })
            .collect();
        Self::new(entries).expect("built-in table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ColorEntry> = serde_json::from_str(text)?;
        Self::new(entries)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("entries serialize")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ColorEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn unknown_index(&self) -> u8 {
        self.unknown as u8
    }

    pub fn index_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.lookup.get(&rgb).copied()
    }

    pub fn color_of(&self, index: u8) -> Option<[u8; 3]> {
        self.entries.get(index as usize).map(|e| e.rgb)
    }

    pub fn index_of_name(&self, name: &str) -> Option<u8> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| i as u8)
    }
}

/// Maps every pixel of an RGB mask to its class index.
pub fn decode_mask(rgb_mask: &RgbImage, table: &ColorCodeTable) -> Result<ClassMap> {
    let (map, _) = decode_mask_with(rgb_mask, table, ColorMatching::Exact)?;
    Ok(map)
}

pub fn decode_mask_with(
    rgb_mask: &RgbImage,
    table: &ColorCodeTable,
    matching: ColorMatching,
) -> Result<(ClassMap, DecodeReport)> {
    let (w, h) = rgb_mask.dimensions();
    let mut data = Vec::with_capacity(w as usize * h as usize);
    let mut unmatched: HashMap<[u8; 3], u64> = HashMap::new();
    // Masks are dominated by long runs of one color.
    let mut last: Option<([u8; 3], u8)> = None;
    for (x, y, px) in rgb_mask.enumerate_pixels() {
        let rgb = px.0;
        if let Some((c, i)) = last {
            if c == rgb {
                data.push(i);
                continue;
            }
        }
        match table.index_of(rgb) {
            Some(i) => {
                last = Some((rgb, i));
                data.push(i);
            }
            None => match matching {
                ColorMatching::Exact => return Err(Error::UnknownColor { x, y, rgb }),
                ColorMatching::Lenient => {
                    *unmatched.entry(rgb).or_default() += 1;
                    data.push(table.unknown_index());
                }
            },
        }
    }
    let mut unmatched_colors: Vec<([u8; 3], u64)> = unmatched.into_iter().collect();
    unmatched_colors.sort();
    let report = DecodeReport {
        unmatched_pixels: unmatched_colors.iter().map(|(_, n)| n).sum(),
        unmatched_colors,
    };
    Ok((ClassMap::new(w, h, data)?, report))
}

/// Inverse of [`decode_mask`]: paints each class with its table color.
pub fn encode_mask(index_map: &ClassMap, table: &ColorCodeTable) -> Result<RgbImage> {
    let (w, h) = index_map.dims();
    let mut out = RgbImage::new(w, h);
    for (i, px) in out.pixels_mut().enumerate() {
        let class = index_map.data[i];
        match table.color_of(class) {
            Some(rgb) => px.0 = rgb,
            None => {
                return Err(Error::IndexOutOfRange {
                    x: (i % w as usize) as u32,
                    y: (i / w as usize) as u32,
                    index: class,
                    classes: table.len(),
                })
            }
        }
    }
    Ok(out)
}

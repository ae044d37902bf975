//! Seeded image augmentation for fine-tuning and two-view pre-training.
//!
//! A pipeline is an ordered list of [`AugmentOp`]s plus a seed. Each call is
//! driven by a generator derived from `(seed, stream)`, where the caller picks
//! the stream from the sample index and epoch. Output therefore does not
//! depend on which worker processes a sample or in what order.
//!
//! Geometric ops (flips, crops, resizes) are applied identically to the image
//! and its companion mask; photometric ops touch the image only.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassMap;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH {
        p: f64,
    },
    FlipV {
        p: f64,
    },
    /// Random square crop.
    Crop {
        size: u32,
    },
    CenterCrop {
        size: u32,
    },
    Resize {
        size: u32,
    },
    /// Crop a random area fraction and aspect ratio, then resize to `size`.
    ResizedCrop {
        size: u32,
        scale: [f64; 2],
        #[serde(default = "default_ratio")]
        ratio: [f64; 2],
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        p: f64,
    },
    Grayscale {
        p: f64,
    },
    Blur {
        sigma: [f64; 2],
        p: f64,
    },
}

fn default_ratio() -> [f64; 2] {
    [3.0 / 4.0, 4.0 / 3.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub ops: Vec<AugmentOp>,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            ops: vec![],
            seed: 0,
        }
    }

    /// Two-view recipe for SimSiam pre-training.
    pub fn simsiam(view_size: u32, seed: u64) -> Self {
        Self {
            ops: vec![
                AugmentOp::ResizedCrop {
                    size: view_size,
                    scale: [0.2, 1.0],
                    ratio: default_ratio(),
                },
                AugmentOp::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.1,
                    p: 0.8,
                },
                AugmentOp::Grayscale { p: 0.2 },
                AugmentOp::Blur {
                    sigma: [0.1, 2.0],
                    p: 0.5,
                },
                AugmentOp::FlipH { p: 0.5 },
            ],
            seed,
        }
    }

    /// Random horizontal and vertical flips plus a random square crop.
    pub fn finetune(crop: u32, seed: u64) -> Self {
        Self {
            ops: vec![
                AugmentOp::FlipH { p: 0.5 },
                AugmentOp::FlipV { p: 0.5 },
                AugmentOp::Crop { size: crop },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} probability {p} outside [0, 1]"
                )))
            }
        };
        let size = |name: &str, s: u32| {
            if s > 0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} size must be positive")))
            }
        };
        let range = |name: &str, r: [f64; 2], lo: f64| {
            if r[0] >= lo && r[0] <= r[1] && r[1].is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} range {r:?} is invalid")))
            }
        };
        for op in &self.ops {
            match *op {
                AugmentOp::FlipH { p } => prob("flip_h", p)?,
                AugmentOp::FlipV { p } => prob("flip_v", p)?,
                AugmentOp::Crop { size: s } => size("crop", s)?,
                AugmentOp::CenterCrop { size: s } => size("center_crop", s)?,
                AugmentOp::Resize { size: s } => size("resize", s)?,
                AugmentOp::ResizedCrop { size: s, scale, ratio } => {
                    size("resized_crop", s)?;
                    range("resized_crop scale", scale, f64::MIN_POSITIVE)?;
                    if scale[1] > 1.0 {
                        return Err(Error::InvalidArgument(format!(
                            "resized_crop scale {scale:?} exceeds 1"
                        )));
                    }
                    range("resized_crop ratio", ratio, f64::MIN_POSITIVE)?;
                }
                AugmentOp::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                    p,
                } => {
                    prob("color_jitter", p)?;
                    if [brightness, contrast, saturation].iter().any(|s| !(*s >= 0.0))
                        || !(0.0..=0.5).contains(&hue)
                    {
                        return Err(Error::InvalidArgument(
                            "color_jitter strengths must be >= 0 and hue in [0, 0.5]".into(),
                        ));
                    }
                }
                AugmentOp::Grayscale { p } => prob("grayscale", p)?,
                AugmentOp::Blur { sigma, p } => {
                    prob("blur", p)?;
                    range("blur sigma", sigma, f64::MIN_POSITIVE)?;
                }
            }
        }
        Ok(())
    }

    /// Side length of the output when the pipeline ends in a fixed size.
    pub fn output_size(&self) -> Option<u32> {
        self.ops.iter().rev().find_map(|op| match *op {
            AugmentOp::Crop { size }
            | AugmentOp::CenterCrop { size }
            | AugmentOp::Resize { size }
            | AugmentOp::ResizedCrop { size, .. } => Some(size),
            _ => None,
        })
    }

    pub fn rng_for(&self, stream: u64) -> ChaCha8Rng {
        seed::rng(seed::derive_indexed(self.seed, "augment", &[stream]))
    }

    /// Runs the pipeline with the generator for `stream`.
    pub fn apply(
        &self,
        image: &RgbImage,
        mask: Option<&ClassMap>,
        stream: u64,
    ) -> Result<(RgbImage, Option<ClassMap>)> {
        self.apply_with(image, mask, &mut self.rng_for(stream))
    }

    pub fn apply_with(
        &self,
        image: &RgbImage,
        mask: Option<&ClassMap>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(RgbImage, Option<ClassMap>)> {
        if let Some(m) = mask {
            if m.dims() != image.dimensions() {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} vs mask {:?}",
                    image.dimensions(),
                    m.dims()
                )));
            }
        }
        let mut img = image.clone();
        let mut mask = mask.cloned();
        for op in &self.ops {
            match *op {
                AugmentOp::FlipH { p } => {
                    if rng.random_bool(p) {
                        img = imageops::flip_horizontal(&img);
                        mask = mask.map(|m| flip_h_map(&m));
                    }
                }
                AugmentOp::FlipV { p } => {
                    if rng.random_bool(p) {
                        img = imageops::flip_vertical(&img);
                        mask = mask.map(|m| flip_v_map(&m));
                    }
                }
                AugmentOp::Crop { size } => {
                    let (w, h) = img.dimensions();
                    check_crop(size, w, h)?;
                    let x = rng.random_range(0..=w - size);
                    let y = rng.random_range(0..=h - size);
                    img = imageops::crop_imm(&img, x, y, size, size).to_image();
                    mask = mask.map(|m| crop_map(&m, x, y, size, size));
                }
                AugmentOp::CenterCrop { size } => {
                    let (w, h) = img.dimensions();
                    check_crop(size, w, h)?;
                    let (x, y) = ((w - size) / 2, (h - size) / 2);
                    img = imageops::crop_imm(&img, x, y, size, size).to_image();
                    mask = mask.map(|m| crop_map(&m, x, y, size, size));
                }
                AugmentOp::Resize { size } => {
                    if img.dimensions() != (size, size) {
                        img = imageops::resize(&img, size, size, FilterType::Triangle);
                        mask = mask.map(|m| resize_nearest(&m, size, size));
                    }
                }
                AugmentOp::ResizedCrop { size, scale, ratio } => {
                    let (w, h) = img.dimensions();
                    let (x, y, cw, ch) = resized_crop_params(w, h, scale, ratio, rng);
                    let crop = imageops::crop_imm(&img, x, y, cw, ch).to_image();
                    img = imageops::resize(&crop, size, size, FilterType::Triangle);
                    mask = mask.map(|m| resize_nearest(&crop_map(&m, x, y, cw, ch), size, size));
                }
                AugmentOp::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                    p,
                } => {
                    if rng.random_bool(p) {
                        color_jitter(&mut img, [brightness, contrast, saturation, hue], rng);
                    }
                }
                AugmentOp::Grayscale { p } => {
                    if rng.random_bool(p) {
                        to_grayscale(&mut img);
                    }
                }
                AugmentOp::Blur { sigma, p } => {
                    if rng.random_bool(p) {
                        let s = rng.random_range(sigma[0]..=sigma[1]);
                        img = imageops::blur(&img, s as f32);
                    }
                }
            }
        }
        Ok((img, mask))
    }

    /// Two independent draws of the pipeline on the same image.
    pub fn two_views(&self, image: &RgbImage, stream: u64) -> Result<(RgbImage, RgbImage)> {
        let mut rng1 = seed::rng(seed::derive_indexed(self.seed, "view", &[stream, 0]));
        let mut rng2 = seed::rng(seed::derive_indexed(self.seed, "view", &[stream, 1]));
        let (v1, _) = self.apply_with(image, None, &mut rng1)?;
        let (v2, _) = self.apply_with(image, None, &mut rng2)?;
        Ok((v1, v2))
    }
}

fn check_crop(size: u32, w: u32, h: u32) -> Result<()> {
    if size == 0 || size > w || size > h {
        return Err(Error::InvalidArgument(format!(
            "crop size {size} does not fit a {w}x{h} image"
        )));
    }
    Ok(())
}

fn resized_crop_params(
    w: u32,
    h: u32,
    scale: [f64; 2],
    ratio: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> (u32, u32, u32, u32) {
    let area = (w as f64) * (h as f64);
    let (log_lo, log_hi) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale[0]..=scale[1]);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as u32;
        let ch = (target / aspect).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    // Fall back to the largest centered crop within the ratio bounds.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio[0] {
        (w, ((w as f64 / ratio[0]).round() as u32).clamp(1, h))
    } else if in_ratio > ratio[1] {
        (((h as f64 * ratio[1]).round() as u32).clamp(1, w), h)
    } else {
        (w, h)
    };
    ((w - cw) / 2, (h - ch) / 2, cw, ch)
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn to_grayscale(img: &mut RgbImage) {
    for px in img.pixels_mut() {
        let l = luma(px.0.map(f32::from)).round().clamp(0.0, 255.0) as u8;
        px.0 = [l, l, l];
    }
}

fn color_jitter(img: &mut RgbImage, strength: [f64; 4], rng: &mut ChaCha8Rng) {
    let factor = |s: f64, rng: &mut ChaCha8Rng| {
        if s > 0.0 {
            Some(rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32)
        } else {
            None
        }
    };
    let b = factor(strength[0], rng);
    let c = factor(strength[1], rng);
    let s = factor(strength[2], rng);
    let hshift = if strength[3] > 0.0 {
        Some(rng.random_range(-strength[3]..=strength[3]) as f32)
    } else {
        None
    };
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);

    let mut buf: Vec<[f32; 3]> = img.pixels().map(|p| p.0.map(f32::from)).collect();
    let blend = |x: f32, y: f32, f: f32| (f * x + (1.0 - f) * y).clamp(0.0, 255.0);
    for step in order {
        match step {
            0 => {
                if let Some(f) = b {
                    for p in &mut buf {
                        *p = p.map(|v| blend(v, 0.0, f));
                    }
                }
            }
            1 => {
                if let Some(f) = c {
                    let mean = buf.iter().map(|p| luma(*p).round()).sum::<f32>() / buf.len() as f32;
                    for p in &mut buf {
                        *p = p.map(|v| blend(v, mean, f));
                    }
                }
            }
            2 => {
                if let Some(f) = s {
                    for p in &mut buf {
                        let g = luma(*p);
                        *p = p.map(|v| blend(v, g, f));
                    }
                }
            }
            _ => {
                if let Some(shift) = hshift {
                    for p in &mut buf {
                        let (h, s, v) = rgb_to_hsv(*p);
                        *p = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
                    }
                }
            }
        }
    }
    for (px, p) in img.pixels_mut().zip(buf) {
        px.0 = p.map(|v| v.round().clamp(0.0, 255.0) as u8);
    }
}

fn rgb_to_hsv(p: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = p.map(|v| v / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| c * 255.0)
}

pub fn flip_h_map(m: &ClassMap) -> ClassMap {
    let (w, h) = m.dims();
    let src = m.as_slice();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks(w as usize) {
        out.extend(row.iter().rev());
    }
    ClassMap::new(w, h, out).expect("same dims")
}

pub fn flip_v_map(m: &ClassMap) -> ClassMap {
    let (w, h) = m.dims();
    let mut out = Vec::with_capacity(m.as_slice().len());
    for row in m.as_slice().chunks(w as usize).rev() {
        out.extend_from_slice(row);
    }
    ClassMap::new(w, h, out).expect("same dims")
}

pub fn crop_map(m: &ClassMap, x: u32, y: u32, w: u32, h: u32) -> ClassMap {
    let stride = m.width() as usize;
    let mut out = Vec::with_capacity(w as usize * h as usize);
    for row in y..y + h {
        let start = row as usize * stride + x as usize;
        out.extend_from_slice(&m.as_slice()[start..start + w as usize]);
    }
    ClassMap::new(w, h, out).expect("crop dims")
}

/// Nearest-neighbour resize using pixel centers.
pub fn resize_nearest(m: &ClassMap, w: u32, h: u32) -> ClassMap {
    let (sw, sh) = m.dims();
    let mut out = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * sh as f64 / h as f64) as u32).min(sh - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * sw as f64 / w as f64) as u32).min(sw - 1);
            out.push(m.get(sx, sy));
        }
    }
    ClassMap::new(w, h, out).expect("resize dims")
}

/// Reflect-pads an image on the right and bottom (edge pixel not repeated).
pub fn reflect_pad(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let (sw, sh) = img.dimensions();
    assert!(w >= sw && h >= sh, "padding cannot shrink");
    let reflect = |i: u32, n: u32| -> u32 {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    RgbImage::from_fn(w, h, |x, y| *img.get_pixel(reflect(x, sw), reflect(y, sh)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{decode_mask, encode_mask, ColorCodeTable};

    fn noise_image(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = seed::rng(seed);
        RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn random_map(w: u32, h: u32, seed: u64) -> ClassMap {
        let mut rng = seed::rng(seed);
        ClassMap::new(w, h, (0..w * h).map(|_| rng.random_range(0..7u8)).collect()).unwrap()
    }

    #[test]
    fn zero_probability_spec_is_identity() {
        let spec = AugmentSpec {
            ops: vec![
                AugmentOp::FlipH { p: 0.0 },
                AugmentOp::FlipV { p: 0.0 },
                AugmentOp::Grayscale { p: 0.0 },
                AugmentOp::Blur { sigma: [0.1, 2.0], p: 0.0 },
            ],
            seed: 1,
        };
        let img = noise_image(9, 7, 1);
        let mask = random_map(9, 7, 2);
        let (a, m) = spec.apply(&img, Some(&mask), 0).unwrap();
        assert_eq!(a, img);
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn double_flip_is_identity() {
        let spec = AugmentSpec {
            ops: vec![AugmentOp::FlipH { p: 1.0 }, AugmentOp::FlipH { p: 1.0 }, AugmentOp::FlipV { p: 1.0 }, AugmentOp::FlipV { p: 1.0 }],
            seed: 0,
        };
        let img = noise_image(5, 4, 3);
        let mask = random_map(5, 4, 4);
        let (a, m) = spec.apply(&img, Some(&mask), 9).unwrap();
        assert_eq!(a, img);
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn crop_moves_image_and_mask_together() {
        // Encode the mask into the image so alignment is checkable per pixel.
        let table = ColorCodeTable::deepglobe();
        let mask = random_map(96, 80, 5);
        let img = encode_mask(&mask, &table).unwrap();
        let spec = AugmentSpec {
            ops: vec![
                AugmentOp::FlipH { p: 0.5 },
                AugmentOp::FlipV { p: 0.5 },
                AugmentOp::Crop { size: 32 },
            ],
            seed: 11,
        };
        for stream in 0..20 {
            let (a, m) = spec.apply(&img, Some(&mask), stream).unwrap();
            assert_eq!(a.dimensions(), (32, 32));
            assert_eq!(decode_mask(&a, &table).unwrap(), m.unwrap());
        }
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let spec = AugmentSpec {
            ops: vec![AugmentOp::Crop { size: 33 }],
            seed: 0,
        };
        assert!(spec.apply(&noise_image(32, 40, 0), None, 0).is_err());
    }

    #[test]
    fn geometric_ops_commute_with_decoding() {
        let table = ColorCodeTable::deepglobe();
        let mask = random_map(13, 11, 8);
        let rgb = encode_mask(&mask, &table).unwrap();
        assert_eq!(
            decode_mask(&imageops::flip_horizontal(&rgb), &table).unwrap(),
            flip_h_map(&decode_mask(&rgb, &table).unwrap())
        );
        assert_eq!(
            decode_mask(&imageops::flip_vertical(&rgb), &table).unwrap(),
            flip_v_map(&decode_mask(&rgb, &table).unwrap())
        );
    }

    #[test]
    fn two_views_are_seed_stable_and_distinct() {
        let spec = AugmentSpec::simsiam(32, 42);
        let img = noise_image(48, 48, 6);
        let (a1, b1) = spec.two_views(&img, 3).unwrap();
        let (a2, b2) = spec.two_views(&img, 3).unwrap();
        assert_eq!((a1.as_raw(), b1.as_raw()), (a2.as_raw(), b2.as_raw()));
        assert_eq!(a1.dimensions(), (32, 32));
        assert_eq!(b1.dimensions(), (32, 32));
        let differing = (0..100)
            .filter(|&s| {
                let (v1, v2) = spec.two_views(&img, s).unwrap();
                v1 != v2
            })
            .count();
        assert!(differing >= 99, "{differing}/100 view pairs differ");
    }

    #[test]
    fn resize_only_views_match_resized_source() {
        let spec = AugmentSpec {
            ops: vec![AugmentOp::Resize { size: 16 }, AugmentOp::FlipH { p: 0.0 }],
            seed: 0,
        };
        let img = noise_image(32, 32, 9);
        let (v1, v2) = spec.two_views(&img, 0).unwrap();
        let resized = imageops::resize(&img, 16, 16, FilterType::Triangle);
        assert_eq!(v1, resized);
        assert_eq!(v2, resized);
    }

    #[test]
    fn default_ssl_views_on_pretraining_tiles() {
        let spec = AugmentSpec::simsiam(224, 0);
        spec.validate().unwrap();
        let (a, b) = spec.two_views(&noise_image(256, 256, 1), 0).unwrap();
        assert_eq!(a.dimensions(), (224, 224));
        assert_eq!(b.dimensions(), (224, 224));
    }

    #[test]
    fn validation_rejects_bad_probabilities() {
        let spec = AugmentSpec {
            ops: vec![AugmentOp::FlipH { p: 1.5 }],
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let spec = AugmentSpec {
            ops: vec![AugmentOp::ResizedCrop { size: 4, scale: [0.5, 0.2], ratio: default_ratio() }],
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_serializes_with_op_tags() {
        let spec = AugmentSpec::finetune(1024, 7);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains(r#""op":"flip_v""#));
        assert_eq!(serde_json::from_str::<AugmentSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn reflect_padding() {
        let img = RgbImage::from_fn(3, 1, |x, _| image::Rgb([x as u8, 0, 0]));
        let padded = reflect_pad(&img, 6, 2);
        let row: Vec<u8> = (0..6).map(|x| padded.get_pixel(x, 0).0[0]).collect();
        assert_eq!(row, vec![0, 1, 2, 1, 0, 1]);
        assert_eq!(padded.get_pixel(4, 1), padded.get_pixel(4, 0));
    }
}

//! Seeded synthetic datasets for smoke runs and tests.

use image::{Rgb, RgbImage};
use rand::Rng;

use super::detection::{BBox, DetectionRecord};
use super::{ClassMap, LabeledVec, SegmentationPair, SegmentationVec};
use crate::seed;

/// Mean color of class `k` out of `k_total`, spread around the hue circle.
pub fn class_color(k: usize, k_total: usize) -> [u8; 3] {
    let h = k as f64 / k_total.max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (40.0 + 175.0 * v).round() as u8;
    [c(r), c(g), c(b)]
}

fn jitter(rng: &mut impl Rng, base: [u8; 3], amp: i32) -> Rgb<u8> {
    Rgb(base.map(|v| (v as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8))
}

/// `per_class` noisy flat-color images per class. A linear probe on the
/// mean pixel separates them perfectly.
pub fn separable_classification(num_classes: usize, per_class: usize, size: u32, seed_value: u64) -> LabeledVec {
    let mut rng = seed::rng(seed::derive(seed_value, "synthetic-classification"));
    let mut items = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for k in 0..num_classes {
            let base = class_color(k, num_classes);
            let img = RgbImage::from_fn(size, size, |_, _| jitter(&mut rng, base, 24));
            items.push((img, k));
        }
    }
    LabeledVec { items, num_classes }
}

/// Images of random axis-aligned rectangles on a gradient background.
pub fn textured_images(n: usize, size: u32, seed_value: u64) -> Vec<RgbImage> {
    let mut rng = seed::rng(seed::derive(seed_value, "synthetic-unlabeled"));
    (0..n)
        .map(|_| {
            let a: [u8; 3] = rng.random();
            let b: [u8; 3] = rng.random();
            let mut img = RgbImage::from_fn(size, size, |x, y| {
                let t = (x + y) as f64 / (2 * size) as f64;
                Rgb([0, 1, 2].map(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t) as u8))
            });
            for _ in 0..rng.random_range(2..6) {
                let color: [u8; 3] = rng.random();
                let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
                let (w, h) = (rng.random_range(2..=size / 2), rng.random_range(2..=size / 2));
                for y in y0..(y0 + h).min(size) {
                    for x in x0..(x0 + w).min(size) {
                        img.put_pixel(x, y, Rgb(color));
                    }
                }
            }
            img
        })
        .collect()
}

/// Segmentation pairs whose image color at each pixel is a noisy class
/// color, so the mask is recoverable from color alone. The layout assigns a
/// random class to each `cell x cell` block.
pub fn color_separable_segmentation(n: usize, size: u32, num_classes: usize, cell: u32, seed_value: u64) -> SegmentationVec {
    let mut rng = seed::rng(seed::derive(seed_value, "synthetic-segmentation"));
    let cell = cell.max(1);
    let cells = size.div_ceil(cell);
    let pairs = (0..n)
        .map(|i| {
            let classes: Vec<u8> = (0..cells * cells).map(|_| rng.random_range(0..num_classes) as u8).collect();
            let mut mask = ClassMap::filled(size, size, 0);
            for y in 0..size {
                for x in 0..size {
                    mask.set(x, y, classes[((y / cell) * cells + x / cell) as usize]);
                }
            }
            let image = RgbImage::from_fn(size, size, |x, y| {
                jitter(&mut rng, class_color(mask.get(x, y) as usize, num_classes), 12)
            });
            SegmentationPair {
                image,
                mask,
                source_id: format!("synthetic_{i:04}"),
            }
        })
        .collect();
    SegmentationVec { pairs, num_classes }
}

/// Scenes of one to three flat class-colored rectangles on a dark noisy
/// background, with their ground-truth boxes. Image ids are `scene_0000`.
pub fn box_scenes(n: usize, size: u32, num_classes: usize, seed_value: u64) -> Vec<(RgbImage, DetectionRecord)> {
    let mut rng = seed::rng(seed::derive(seed_value, "synthetic-detection"));
    let min_side = (size / 6).max(4);
    let max_side = (size / 2).max(min_side + 1);
    (0..n)
        .map(|i| {
            let mut img = RgbImage::from_fn(size, size, |_, _| jitter(&mut rng, [20, 20, 20], 10));
            let mut boxes = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                let k = rng.random_range(0..num_classes);
                let (w, h) = (rng.random_range(min_side..max_side), rng.random_range(min_side..max_side));
                let (x0, y0) = (rng.random_range(0..=size - w), rng.random_range(0..=size - h));
                let color = class_color(k, num_classes);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        img.put_pixel(x, y, jitter(&mut rng, color, 8));
                    }
                }
                boxes.push(BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64));
                labels.push(k);
            }
            (img, DetectionRecord::ground_truth(format!("scene_{i:04}"), boxes, labels))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabeledImages, SegmentationSource};

    #[test]
    fn deterministic_and_shaped() {
        let a = separable_classification(4, 3, 32, 1);
        assert_eq!(a.len(), 12);
        assert_eq!(a.items[5].0, separable_classification(4, 3, 32, 1).items[5].0);
        let colors: std::collections::BTreeSet<_> = (0..7).map(|k| class_color(k, 7)).collect();
        assert_eq!(colors.len(), 7);
        let seg = color_separable_segmentation(3, 64, 7, 32, 2);
        assert_eq!(seg.len(), 3);
        assert!(seg.pairs.iter().all(|p| p.mask.max_class().unwrap() < 7));
        assert_eq!(textured_images(2, 48, 0)[1].dimensions(), (48, 48));
        let scenes = box_scenes(4, 96, 3, 5);
        assert!(scenes.iter().all(|(img, r)| img.width() == 96 && !r.is_empty() && r.validate(3).is_ok()));
    }
}

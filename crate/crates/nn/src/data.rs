//! Image batches to tensors, epoch shuffling and ordered parallel loading.

use candle_core::{DType, Device, Tensor};
use geopretrain_core::checkpoint::Normalization;
use geopretrain_core::dataset::ClassMap;
use geopretrain_core::seed;
use image::RgbImage;
use rand::seq::SliceRandom;

use crate::{Error, Result};

/// Stacks equally sized images into an N x 3 x H x W tensor, scaled to
/// [0, 1] and normalized per channel.
pub fn images_to_tensor(images: &[RgbImage], norm: &Normalization, dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?} images",
                (w, h),
                img.dimensions()
            )));
        }
        let base = n * 3 * plane;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = (px.0[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

/// Stacks class maps into an N x H x W u32 tensor.
pub fn masks_to_tensor(masks: &[ClassMap], device: &Device) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("empty mask batch".into()));
    };
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * (w * h) as usize);
    for m in masks {
        if m.dims() != (w, h) {
            return Err(Error::Shape("batch mixes mask sizes".into()));
        }
        data.extend(m.as_slice().iter().map(|&c| c as u32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), h as usize, w as usize), device)?)
}

/// Per-pixel argmax of N x K x H x W logits as class maps.
pub fn argmax_maps(logits: &Tensor) -> Result<Vec<ClassMap>> {
    let (n, _, h, w) = logits.dims4()?;
    let idx = logits.argmax(1)?.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
    idx.chunks(h * w)
        .take(n)
        .map(|c| Ok(ClassMap::new(w as u32, h as u32, c.iter().map(|&v| v as u8).collect())?))
        .collect()
}

/// Shuffled batches of `indices` for one epoch. The order depends only on
/// `(seed, epoch)`. A trailing partial batch is dropped when `drop_last`.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut seed::rng(seed::derive_indexed(seed, "shuffle", &[epoch as u64])));
    order
        .chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let results: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Backend("loader thread panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Default worker count for data loading.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

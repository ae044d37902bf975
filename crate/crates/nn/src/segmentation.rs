//! DeepLabV3-style segmentation at output stride 32 with an optional slim
//! decoder, fine-tuning and full-image inference.

use candle_core::{DType, Tensor};
use geopretrain_core::augment::{reflect_pad, AugmentSpec};
use geopretrain_core::checkpoint::{Checkpoint, CheckpointMeta, Normalization, TransplantMode, TransplantReport};
use geopretrain_core::dataset::{deterministic_split, encode_mask, ClassMap, ColorCodeTable, SegmentationSource, Split, SplitSpec};
use geopretrain_core::metrics::{ConfusionMatrix, SegScores};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::data::{argmax_maps, epoch_batches, images_to_tensor, masks_to_tensor, parallel_map};
use crate::layers::{cross_entropy, global_avg_pool, no_grad, resize_bilinear, BatchNorm, Conv2d, ConvCfg, Mode};
use crate::optim::{Adam, DecayPolicy, Optimizer};
use crate::params::ParamStore;
use crate::train::{check_finite, fmt_f64, load_backbone, scalar, stream};
use crate::{Error, Result};

/// Reduction in head parameters the slim decoder aims for.
pub const SLIM_TARGET: usize = 600_000;
pub const SLIM_TOLERANCE: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegHeadSpec {
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    /// Width after the ASPP projection. `None` uses `aspp_channels`, or the
    /// computed slim width when `slim` is set.
    pub classifier_channels: Option<usize>,
    pub num_classes: usize,
    pub slim: bool,
}

impl Default for SegHeadSpec {
    fn default() -> Self {
        Self {
            aspp_rates: vec![6, 12, 18],
            aspp_channels: 256,
            classifier_channels: None,
            num_classes: 7,
            slim: true,
        }
    }
}

impl SegHeadSpec {
    pub fn reference(num_classes: usize) -> Self {
        Self {
            num_classes,
            slim: false,
            ..Self::default()
        }
    }

    /// Narrow head for the tiny backbone.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            aspp_channels: 32,
            num_classes,
            slim: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::config("ASPP rates must be positive"));
        }
        let mut sorted = self.aspp_rates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.aspp_rates.len() {
            return Err(Error::config(format!("ASPP rates {:?} must be distinct", self.aspp_rates)));
        }
        if self.aspp_channels == 0 || self.num_classes < 2 || self.classifier_channels == Some(0) {
            return Err(Error::config("head widths must be positive and num_classes >= 2"));
        }
        Ok(())
    }

    /// Parameters of the head for a given backbone width and decoder width.
    pub fn param_count(&self, in_channels: usize, width: usize) -> usize {
        let c = self.aspp_channels;
        let bn = |ch: usize| 2 * ch;
        let branches = 2 + self.aspp_rates.len();
        let aspp = (in_channels * c + bn(c)) // 1x1
            + self.aspp_rates.len() * (in_channels * c * 9 + bn(c))
            + (in_channels * c + bn(c)); // image pooling
        let project = branches * c * width + bn(width);
        let conv3 = width * width * 9 + bn(width);
        let classifier = width * self.num_classes + self.num_classes;
        aspp + project + conv3 + classifier
    }

    /// Decoder width after resolving `slim`.
    pub fn width(&self, in_channels: usize) -> Result<usize> {
        if let Some(w) = self.classifier_channels {
            return Ok(w);
        }
        let full = self.aspp_channels;
        if !self.slim {
            return Ok(full);
        }
        let reference = self.param_count(in_channels, full);
        let (w, delta) = (1..full)
            .map(|w| (w, reference - self.param_count(in_channels, w)))
            .min_by_key(|&(_, d)| d.abs_diff(SLIM_TARGET))
            .ok_or_else(|| Error::config("aspp_channels too small for a slim head"))?;
        if delta.abs_diff(SLIM_TARGET) > SLIM_TOLERANCE {
            return Err(Error::config(format!(
                "no slim width gets within {SLIM_TOLERANCE} of a {SLIM_TARGET}-parameter reduction (best {delta} at width {w})"
            )));
        }
        Ok(w)
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: ConvCfg) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, cfg)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// ASPP (1x1, atrous 3x3 per rate, image pooling), projection, a 3x3 conv
/// and the per-class 1x1 classifier, all under `head.`.
pub struct DeepLabHead {
    branches: Vec<ConvBn>,
    pooling: ConvBn,
    project: ConvBn,
    conv3: ConvBn,
    classifier: Conv2d,
}

impl DeepLabHead {
    pub fn new(ps: &mut ParamStore, in_channels: usize, spec: &SegHeadSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.aspp_channels;
        let width = spec.width(in_channels)?;
        let mut branches = vec![ConvBn::new(ps, "head.aspp.0", in_channels, c, ConvCfg::k(1))?];
        for (i, &r) in spec.aspp_rates.iter().enumerate() {
            branches.push(ConvBn::new(ps, &format!("head.aspp.{}", i + 1), in_channels, c, ConvCfg::k(3).dilation(r))?);
        }
        let pooling = ConvBn::new(ps, "head.aspp.pool", in_channels, c, ConvCfg::k(1))?;
        let project = ConvBn::new(ps, "head.project", (branches.len() + 1) * c, width, ConvCfg::k(1))?;
        let conv3 = ConvBn::new(ps, "head.conv3", width, width, ConvCfg::k(3))?;
        let classifier = Conv2d::new(ps, "head.classifier", width, spec.num_classes, ConvCfg::k(1).bias())?;
        Ok(Self {
            branches,
            pooling,
            project,
            conv3,
            classifier,
        })
    }

    /// C5 to stride-32 logits.
    pub fn forward(&self, c5: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, _, h, w) = c5.dims4()?;
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            outs.push(b.forward(c5, mode)?);
        }
        let pooled = self.pooling.forward(&global_avg_pool(c5)?, mode)?;
        let c = pooled.dim(1)?;
        outs.push(pooled.broadcast_as((n, c, h, w))?.contiguous()?);
        let y = self.project.forward(&Tensor::cat(&outs, 1)?, mode)?;
        let y = self.conv3.forward(&y, mode)?;
        self.classifier.forward(&y)
    }
}

pub struct SegModel {
    pub ps: ParamStore,
    pub backbone: Backbone,
    pub head: DeepLabHead,
    pub spec: SegHeadSpec,
    pub normalization: Normalization,
}

impl SegModel {
    pub fn new(backbone: &BackboneSpec, head: &SegHeadSpec, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::cpu(seed);
        let bb = Backbone::new(&mut ps, "backbone", backbone)?;
        let head_mod = DeepLabHead::new(&mut ps, backbone.out_channels(), head)?;
        Ok(Self {
            ps,
            backbone: bb,
            head: head_mod,
            spec: head.clone(),
            normalization: Normalization::default(),
        })
    }

    /// Rebuilds a fine-tuned model from its checkpoint (backbone variant and
    /// head spec come from the metadata).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let head: SegHeadSpec = ckpt
            .meta
            .extra
            .get("head")
            .cloned()
            .ok_or_else(|| Error::config("checkpoint has no segmentation head spec; fine-tune it first"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::config(format!("head spec: {e}"))))?;
        let mut model = Self::new(&BackboneSpec::from_variant(&ckpt.meta.backbone)?, &head, 0)?;
        model.ps.load_complete(ckpt)?;
        model.normalization = ckpt.meta.normalization.clone();
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn head_param_count(&self) -> usize {
        self.ps.count("head.")
    }

    /// Stride-32 logits before upsampling.
    pub fn forward_coarse(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let c5 = self.backbone.forward(x, mode)?.swap_remove(3);
        let (_, _, ch, cw) = c5.dims4()?;
        if ch * 32 != h || cw * 32 != w {
            return Err(Error::Shape(format!(
                "deepest map {ch}x{cw} is not input {h}x{w} at stride 32"
            )));
        }
        self.head.forward(&c5, mode)
    }

    /// Logits at input resolution.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        resize_bilinear(&self.forward_coarse(x, mode)?, h, w)
    }

    fn image_tensor(&self, images: &[RgbImage]) -> Result<Tensor> {
        images_to_tensor(images, &self.normalization, self.ps.dtype(), self.ps.device())
    }

    /// Per-pixel class map of an image of any size: reflect-padded to a
    /// multiple of 32, then cropped back.
    pub fn predict_mask(&self, image: &RgbImage) -> Result<ClassMap> {
        let (w, h) = image.dimensions();
        let (pw, ph) = (w.div_ceil(32) * 32, h.div_ceil(32) * 32);
        let padded = if (pw, ph) == (w, h) { image.clone() } else { reflect_pad(image, pw, ph) };
        let logits = no_grad(|| self.forward(&self.image_tensor(&[padded])?, Mode::Eval))?;
        let full = argmax_maps(&logits)?.swap_remove(0);
        Ok(crop_map(&full, w, h))
    }

    /// Class map plus its color-coded rendering.
    pub fn predict_with_overlay(&self, image: &RgbImage, table: &ColorCodeTable) -> Result<(ClassMap, RgbImage)> {
        let map = self.predict_mask(image)?;
        let overlay = encode_mask(&map, table)?;
        Ok((map, overlay))
    }

    /// Tiled inference over `tile x tile` windows (multiples of 32).
    /// Softmax scores are blended with weights that fall off linearly
    /// towards each window edge, so pixels near a border, where the
    /// receptive field runs into padding, count least.
    pub fn predict_sliding(&self, image: &RgbImage, tile: u32, overlap: u32) -> Result<ClassMap> {
        let (w, h) = image.dimensions();
        let (pw, ph) = (w.div_ceil(32) * 32, h.div_ceil(32) * 32);
        if tile == 0 || tile % 32 != 0 || overlap >= tile {
            return Err(Error::config(format!("tile {tile} must be a positive multiple of 32 above overlap {overlap}")));
        }
        let padded = if (pw, ph) == (w, h) { image.clone() } else { reflect_pad(image, pw, ph) };
        let (tw, th) = (tile.min(pw), tile.min(ph));
        let ramp = |i: u32, n: u32| (i.min(n - 1 - i) + 1) as f32;
        let k = self.num_classes();
        let plane = (pw * ph) as usize;
        let mut scores = vec![0f32; k * plane];
        for y0 in window_starts(ph, th, overlap) {
            for x0 in window_starts(pw, tw, overlap) {
                let crop = image::imageops::crop_imm(&padded, x0, y0, tw, th).to_image();
                let logits = no_grad(|| self.forward(&self.image_tensor(&[crop])?, Mode::Eval))?;
                let probs = candle_nn::ops::softmax(&logits, 1)?
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                for c in 0..k {
                    for y in 0..th {
                        for x in 0..tw {
                            let weight = ramp(x, tw).min(ramp(y, th));
                            let src = (c as u32 * th * tw + y * tw + x) as usize;
                            let dst = c * plane + ((y0 + y) * pw + x0 + x) as usize;
                            scores[dst] += weight * probs[src];
                        }
                    }
                }
            }
        }
        let data = (0..plane)
            .map(|i| {
                (0..k)
                    .map(|c| scores[c * plane + i])
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
                    .0 as u8
            })
            .collect();
        Ok(crop_map(&ClassMap::new(pw, ph, data)?, w, h))
    }
}

fn window_starts(size: u32, tile: u32, overlap: u32) -> Vec<u32> {
    let stride = tile - overlap;
    let mut starts: Vec<u32> = (0..).map(|i| i * stride).take_while(|&s| s + tile < size).collect();
    starts.push(size - tile);
    starts
}

fn crop_map(map: &ClassMap, w: u32, h: u32) -> ClassMap {
    if map.dims() == (w, h) {
        map.clone()
    } else {
        geopretrain_core::augment::crop_map(map, 0, 0, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub crop: u32,
    pub flips: bool,
    pub eval_fraction: f64,
    pub seed: u64,
    /// Per-class loss weights; `None` for plain cross-entropy.
    pub class_weights: Option<Vec<f64>>,
    /// Class left out of the loss and of the reported scores.
    pub ignore_class: Option<u8>,
    pub max_steps: Option<usize>,
    pub workers: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            weight_decay: 1e-4,
            epochs: 5,
            crop: 1024,
            flips: true,
            eval_fraction: 0.2,
            seed: 0,
            class_weights: None,
            ignore_class: None,
            max_steps: None,
            workers: 1,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr and batch_size must be positive, weight_decay non-negative"));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(Error::config(format!("crop {} must be a positive multiple of 32", self.crop)));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config(format!("eval_fraction must be in (0, 1), got {}", self.eval_fraction)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes || w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::config(format!("class_weights needs {num_classes} non-negative values")));
            }
        }
        if self.ignore_class.is_some_and(|c| c as usize >= num_classes) {
            return Err(Error::config("ignore_class out of range"));
        }
        Ok(())
    }

    fn loss_weights(&self, k: usize) -> Option<Vec<f64>> {
        let mut w = self.class_weights.clone();
        if let Some(c) = self.ignore_class {
            w.get_or_insert_with(|| vec![1.0; k])[c as usize] = 0.0;
        }
        w
    }
}

/// Inverse-frequency class weights normalized to mean 1; absent classes get 0.
pub fn inverse_frequency_weights(pixel_counts: &[u64]) -> Vec<f64> {
    let inv: Vec<f64> = pixel_counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    let present = inv.iter().filter(|&&v| v > 0.0).count().max(1);
    let mean = inv.iter().sum::<f64>() / present as f64;
    inv.iter().map(|v| v / mean).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub pa: f64,
    pub pa_macro: f64,
    pub f1: f64,
    pub miou: f64,
    pub lr: f64,
}

pub fn seg_history_csv(history: &[SegEpoch]) -> String {
    let mut out = String::from("epoch,loss,PA,PA_macro,f1,mIoU,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.epoch,
            fmt_f64(h.loss),
            fmt_f64(h.pa),
            fmt_f64(h.pa_macro),
            fmt_f64(h.f1),
            fmt_f64(h.miou),
            fmt_f64(h.lr)
        ));
    }
    out
}

/// Whole-image evaluation of `indices`, merged into one confusion matrix.
pub fn evaluate_segmentation(
    model: &SegModel,
    data: &dyn SegmentationSource,
    indices: &[usize],
    workers: usize,
) -> Result<ConfusionMatrix> {
    let per_image = parallel_map(indices, workers, |&i| {
        let pair = data.load(i)?;
        let pred = model.predict_mask(&pair.image)?;
        let mut cm = ConfusionMatrix::new(model.num_classes());
        cm.update(&pred, &pair.mask)?;
        Ok(cm)
    })?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for part in &per_image {
        cm.merge(part)?;
    }
    Ok(cm)
}

pub fn scores(cm: &ConfusionMatrix, ignore_class: Option<u8>) -> Result<SegScores> {
    match ignore_class {
        Some(c) => Ok(SegScores::from_confusion(&cm.without_classes(&[c as usize]))?),
        None => Ok(SegScores::from_confusion(cm)?),
    }
}

pub struct SegOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<SegEpoch>,
    pub final_scores: SegScores,
    pub confusion: ConfusionMatrix,
    pub split: Split,
    pub transplant: Option<TransplantReport>,
    pub steps: usize,
}

/// Fine-tunes on random crops with flips and scores the held-out images
/// after every epoch. `pretrained` seeds the backbone through a strict
/// transplant.
pub fn finetune_segmentation(
    model: &SegModel,
    data: &dyn SegmentationSource,
    pretrained: Option<&Checkpoint>,
    cfg: &SegTrainConfig,
) -> Result<SegOutcome> {
    let k = model.num_classes();
    cfg.validate(k)?;
    if data.num_classes() != k {
        return Err(Error::Shape(format!("dataset has {} classes, model has {k}", data.num_classes())));
    }
    let transplant = pretrained
        .map(|c| load_backbone(&model.ps, c, TransplantMode::Strict))
        .transpose()?;
    let split = deterministic_split(
        data.len(),
        SplitSpec {
            fraction: 1.0 - cfg.eval_fraction,
            seed: cfg.seed,
        },
    )?;
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::config(format!("{} pairs leave an empty train or eval partition", data.len())));
    }
    let augment = AugmentSpec::finetune(cfg.crop, cfg.seed);
    let augment = if cfg.flips {
        augment
    } else {
        AugmentSpec {
            ops: augment.ops.into_iter().filter(|op| matches!(op, geopretrain_core::augment::AugmentOp::Crop { .. })).collect(),
            ..augment
        }
    };
    let weights = cfg
        .loss_weights(k)
        .map(|w| Tensor::new(w, model.ps.device())?.to_dtype(model.ps.dtype()))
        .transpose()?;
    let mut opt = Adam::new(cfg.weight_decay, DecayPolicy::All);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut cm = ConfusionMatrix::new(k);
    for epoch in 0..cfg.epochs {
        let start = model.ps.snapshot()?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in epoch_batches(&split.train, cfg.batch_size, cfg.seed, epoch, false) {
            if step >= max_steps {
                break;
            }
            let pairs = parallel_map(&batch, cfg.workers, |&i| {
                let pair = data.load(i)?;
                let (img, mask) = augment.apply(&pair.image, Some(&pair.mask), stream(epoch, i))?;
                Ok((img, mask.expect("mask passes through")))
            })?;
            let (images, masks): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let x = model.image_tensor(&images)?;
            let y = masks_to_tensor(&masks, model.ps.device())?;
            let loss = cross_entropy(&model.forward(&x, Mode::Train)?, &y, weights.as_ref())?;
            let value = scalar(&loss)?;
            if let Err(e) = check_finite(value, step) {
                model.ps.restore(&start)?;
                return Err(e);
            }
            opt.step(&model.ps, &loss.backward()?, cfg.lr)?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        cm = evaluate_segmentation(model, data, &split.eval, cfg.workers)?;
        let s = scores(&cm, cfg.ignore_class)?;
        let loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        log::info!("epoch {epoch}: loss {loss:.4} PA {:.4} mIoU {:.4}", s.pa, s.miou);
        history.push(SegEpoch {
            epoch,
            loss,
            pa: s.pa,
            pa_macro: s.pa_macro,
            f1: s.f1,
            miou: s.miou,
            lr: cfg.lr,
        });
    }
    if cfg.epochs == 0 {
        cm = evaluate_segmentation(model, data, &split.eval, cfg.workers)?;
    }
    let final_scores = scores(&cm, cfg.ignore_class)?;

    let method = pretrained.map_or(geopretrain_core::checkpoint::Method::Generalist, |c| c.meta.method);
    let mut meta = CheckpointMeta::new(method, "segmentation", model.backbone.spec().variant.clone());
    meta.epochs = history.len() as u64;
    meta.normalization = model.normalization.clone();
    meta.extra.insert("task".into(), "segmentation".into());
    meta.extra.insert("num_classes".into(), k.into());
    meta.extra.insert("head".into(), serde_json::to_value(&model.spec).expect("spec serializes"));
    Ok(SegOutcome {
        checkpoint: model.ps.to_checkpoint(meta)?,
        history,
        final_scores,
        confusion: cm,
        split,
        transplant,
        steps: step,
    })
}

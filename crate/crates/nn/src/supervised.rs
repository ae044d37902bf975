//! Supervised in-domain pre-training: a classifier on the backbone trained
//! with cross-entropy, Adam and a one-cycle schedule.

use candle_core::Tensor;
use geopretrain_core::augment::{AugmentOp, AugmentSpec};
use geopretrain_core::checkpoint::{Checkpoint, CheckpointMeta, Method, Normalization, TransplantMode, TransplantReport};
use geopretrain_core::dataset::{deterministic_split, LabeledImages, Split, SplitSpec};
use geopretrain_core::metrics::{AccuracyCounter, AccuracyReport};
use geopretrain_core::schedule::{LrSchedule, OneCycle};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::data::{epoch_batches, images_to_tensor, parallel_map};
use crate::heads::ClassifierHead;
use crate::layers::{cross_entropy, no_grad, Mode};
use crate::optim::{Adam, DecayPolicy, Optimizer};
use crate::params::ParamStore;
use crate::train::{check_finite, fmt_f64, load_backbone, scalar, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub pct_start: f64,
    pub weight_decay: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    /// Resize inputs to this square size; `None` keeps native size.
    pub input_size: Option<u32>,
    pub flips: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub workers: usize,
}

impl Default for SupTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 120,
            epochs: 100,
            peak_lr: 1e-3,
            pct_start: 0.3,
            weight_decay: 0.0,
            eval_fraction: 0.1,
            seed: 0,
            input_size: None,
            flips: true,
            max_steps: None,
            workers: 1,
        }
    }
}

impl SupTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be at least 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config(format!("eval_fraction must be in (0, 1), got {}", self.eval_fraction)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        self.schedule(1).validate()?;
        Ok(())
    }

    fn schedule(&self, total_steps: usize) -> OneCycle {
        OneCycle {
            pct_start: self.pct_start,
            ..OneCycle::new(self.peak_lr, total_steps)
        }
    }

    fn train_augment(&self) -> AugmentSpec {
        let mut ops = self.eval_augment().ops;
        if self.flips {
            ops.push(AugmentOp::FlipH { p: 0.5 });
            ops.push(AugmentOp::FlipV { p: 0.5 });
        }
        AugmentSpec { ops, seed: self.seed }
    }

    fn eval_augment(&self) -> AugmentSpec {
        AugmentSpec {
            ops: self.input_size.map(|size| AugmentOp::Resize { size }).into_iter().collect(),
            seed: self.seed,
        }
    }
}

pub struct Classifier {
    pub ps: ParamStore,
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Classifier {
    pub fn new(spec: &BackboneSpec, num_classes: usize, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::cpu(seed);
        let backbone = Backbone::new(&mut ps, "backbone", spec)?;
        let head = ClassifierHead::new(&mut ps, spec.out_channels(), num_classes)?;
        Ok(Self {
            ps,
            backbone,
            head,
            num_classes,
            normalization: Normalization::default(),
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let feats = self.backbone.forward(x, mode)?;
        self.head.forward(&feats[3])
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = no_grad(|| self.forward(x, Mode::Eval))?;
        Ok(logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }
}

/// Accuracy of `model` on `indices` of `data`, with images passed through
/// `transform` (stream 0).
pub fn evaluate_accuracy(
    model: &Classifier,
    data: &dyn LabeledImages,
    indices: &[usize],
    transform: &AugmentSpec,
    batch_size: usize,
    workers: usize,
) -> Result<AccuracyReport> {
    if indices.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut counter = AccuracyCounter::new(model.num_classes);
    for chunk in indices.chunks(batch_size.max(1)) {
        let loaded = parallel_map(chunk, workers, |&i| {
            let (img, label) = data.load(i)?;
            Ok((transform.apply(&img, None, 0)?.0, label))
        })?;
        let (images, labels): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
        let x = images_to_tensor(&images, &model.normalization, model.ps.dtype(), model.ps.device())?;
        for (p, l) in model.predict(&x)?.into_iter().zip(labels) {
            counter.add(p, l)?;
        }
    }
    Ok(counter.report()?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
    pub lr: f64,
}

pub fn sup_history_csv(history: &[SupEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,eval_acc,lr\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, fmt_f64(h.train_loss), fmt_f64(h.eval_acc), fmt_f64(h.lr)));
    }
    out
}

pub struct SupOutcome {
    /// Weights of the best-eval-accuracy epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<SupEpoch>,
    pub best_epoch: usize,
    pub best_eval: AccuracyReport,
    pub split: Split,
    pub transplant: Option<TransplantReport>,
    pub steps: usize,
}

/// Trains a classifier on `data`, starting its backbone from `generalist`
/// when given. The model is left holding the best-epoch weights.
///
/// On a non-finite loss the model is rolled back to the start of the
/// failing epoch and `Error::NonFinite` is returned, so the caller can still
/// save it.
pub fn train_supervised(
    model: &Classifier,
    data: &dyn LabeledImages,
    generalist: Option<&Checkpoint>,
    dataset_name: &str,
    cfg: &SupTrainConfig,
) -> Result<SupOutcome> {
    cfg.validate()?;
    if data.num_classes() < 2 {
        return Err(Error::config("classification needs at least 2 classes"));
    }
    if data.num_classes() != model.num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes(),
            model.num_classes
        )));
    }
    let transplant = generalist
        .map(|g| load_backbone(&model.ps, g, TransplantMode::Strict))
        .transpose()?;

    let split = deterministic_split(
        data.len(),
        SplitSpec {
            fraction: 1.0 - cfg.eval_fraction,
            seed: cfg.seed,
        },
    )?;
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::config(format!(
            "{} samples leave an empty train or eval partition",
            data.len()
        )));
    }
    debug_assert!(split.train.iter().all(|i| !split.eval.contains(i)));

    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(usize::MAX).min(steps_per_epoch * cfg.epochs);
    let schedule = cfg.schedule(total.max(1));
    let mut opt = Adam::new(cfg.weight_decay, DecayPolicy::All);
    let train_aug = cfg.train_augment();
    let eval_aug = cfg.eval_augment();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, AccuracyReport, _)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = model.ps.snapshot()?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = schedule.lr(step);
        for batch in epoch_batches(&split.train, cfg.batch_size, cfg.seed, epoch, false) {
            if step >= total {
                break;
            }
            let loaded = parallel_map(&batch, cfg.workers, |&i| {
                let (img, label) = data.load(i)?;
                Ok((train_aug.apply(&img, None, stream(epoch, i))?.0, label as u32))
            })?;
            let (images, labels): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
            let x = images_to_tensor(&images, &model.normalization, model.ps.dtype(), model.ps.device())?;
            let y = Tensor::new(labels, model.ps.device())?;
            let loss = cross_entropy(&model.forward(&x, Mode::Train)?, &y, None)?;
            let value = scalar(&loss)?;
            if let Err(e) = check_finite(value, step) {
                model.ps.restore(&start)?;
                return Err(e);
            }
            lr = schedule.lr(step);
            opt.step(&model.ps, &loss.backward()?, lr)?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let eval = evaluate_accuracy(model, data, &split.eval, &eval_aug, cfg.batch_size, cfg.workers)?;
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        log::info!("epoch {epoch}: train_loss {train_loss:.4} eval_acc {:.4} lr {lr:.3e}", eval.global);
        history.push(SupEpoch {
            epoch,
            train_loss,
            eval_acc: eval.global,
            lr,
        });
        // Ties go to the later epoch.
        if best.as_ref().map_or(true, |(_, b, _)| eval.global >= b.global) {
            best = Some((epoch, eval, model.ps.snapshot()?));
        }
    }
    let (best_epoch, best_eval, weights) = best.expect("at least one epoch");
    model.ps.restore(&weights)?;

    let mut meta = CheckpointMeta::new(Method::Supervised, dataset_name, model.backbone.spec().variant.clone());
    meta.epochs = (best_epoch + 1) as u64;
    meta.normalization = model.normalization.clone();
    meta.extra.insert("num_classes".into(), model.num_classes.into());
    meta.extra.insert("best_eval_acc".into(), best_eval.global.into());
    let checkpoint = model.ps.to_checkpoint(meta)?;
    Ok(SupOutcome {
        checkpoint,
        history,
        best_epoch,
        best_eval,
        split,
        transplant,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(SupTrainConfig::default().validate().is_ok());
        for bad in [
            SupTrainConfig { batch_size: 0, ..Default::default() },
            SupTrainConfig { peak_lr: 0.0, ..Default::default() },
            SupTrainConfig { eval_fraction: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn history_csv_header() {
        let csv = sup_history_csv(&[SupEpoch {
            epoch: 0,
            train_loss: 0.5,
            eval_acc: 1.0,
            lr: 1e-3,
        }]);
        assert_eq!(csv, "epoch,train_loss,eval_acc,lr\n0,0.5,1,0.001\n");
    }
}

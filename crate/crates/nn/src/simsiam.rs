//! SimSiam self-supervised pre-training.

use candle_core::{DType, Tensor, D};
use geopretrain_core::augment::AugmentSpec;
use geopretrain_core::checkpoint::{Checkpoint, CheckpointMeta, Method, Normalization, TransplantMode, TransplantReport};
use geopretrain_core::dataset::UnlabeledImages;
use geopretrain_core::schedule::{scale_lr, LrSchedule, MultiStep};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::data::{epoch_batches, images_to_tensor, parallel_map};
use crate::heads::{Predictor, Projector, SimSiamDims};
use crate::layers::{global_avg_pool, Mode};
use crate::optim::{DecayPolicy, Optimizer, Sgd};
use crate::params::ParamStore;
use crate::train::{check_finite, fmt_f64, load_backbone, scalar, stream};
use crate::{Error, Result};

/// Negative cosine similarity of two vectors.
pub fn negcos(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() {
        return Err(Error::Shape(format!("negcos of lengths {} and {}", p.len(), z.len())));
    }
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nz == 0.0 || !np.is_finite() || !nz.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = p.iter().zip(z).map(|(a, b)| (a / np) * (b / nz)).sum();
    Ok(-dot.clamp(-1.0, 1.0))
}

/// Row-wise negative cosine similarity of two N x D tensors, averaged over
/// rows. `z` is detached, so no gradient reaches its producer.
pub fn negcos_batch(p: &Tensor, z: &Tensor) -> Result<Tensor> {
    let z = z.detach();
    let np = p.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let nz = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min_norm = np.min_all()?.minimum(&nz.min_all()?)?;
    if scalar(&min_norm)? <= 0.0 {
        return Err(Error::ZeroNorm);
    }
    let pn = p.broadcast_div(&np)?;
    let zn = z.broadcast_div(&nz)?;
    Ok((pn * zn)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

/// Symmetrized loss: each view's prediction against the other view's
/// stopped projection.
pub fn simsiam_loss(p1: &Tensor, p2: &Tensor, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    Ok(((negcos_batch(p1, z2)? + negcos_batch(p2, z1)?)? * 0.5)?)
}

/// Mean over dimensions of the per-dimension standard deviation (unbiased)
/// of the L2-normalized rows. Near 0 means collapse; healthy embeddings sit
/// near `1/sqrt(D)`.
pub fn collapse_metric(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::config("collapse metric needs at least 2 rows"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embedding rows must share a positive width".into()));
    }
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r.clone()
            }
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = normed.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = normed.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

pub fn collapse_threshold(dim: usize) -> f64 {
    0.1 / (dim as f64).sqrt()
}

pub struct SimSiamModel {
    pub ps: ParamStore,
    pub backbone: Backbone,
    pub projector: Projector,
    pub predictor: Predictor,
    pub dims: SimSiamDims,
    pub normalization: Normalization,
}

pub struct ViewOutputs {
    pub p1: Tensor,
    pub p2: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

impl SimSiamModel {
    pub fn new(spec: &BackboneSpec, dims: SimSiamDims, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::cpu(seed);
        Self::with_store(&mut ps, spec, dims).map(|(b, pr, pd)| Self {
            ps,
            backbone: b,
            projector: pr,
            predictor: pd,
            dims,
            normalization: Normalization::default(),
        })
    }

    /// Builds in a store with a caller-chosen dtype, e.g. f64 for gradient
    /// checks.
    pub fn in_store(mut ps: ParamStore, spec: &BackboneSpec, dims: SimSiamDims) -> Result<Self> {
        let (backbone, projector, predictor) = Self::with_store(&mut ps, spec, dims)?;
        Ok(Self {
            ps,
            backbone,
            projector,
            predictor,
            dims,
            normalization: Normalization::default(),
        })
    }

    fn with_store(ps: &mut ParamStore, spec: &BackboneSpec, dims: SimSiamDims) -> Result<(Backbone, Projector, Predictor)> {
        let backbone = Backbone::new(ps, "backbone", spec)?;
        let projector = Projector::new(ps, spec.out_channels(), dims)?;
        let predictor = Predictor::new(ps, dims)?;
        Ok((backbone, projector, predictor))
    }

    /// Projection `z` of a batch of images.
    pub fn project(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c5 = self.backbone.forward(x, mode)?.swap_remove(3);
        self.projector.forward(&global_avg_pool(&c5)?.flatten_from(1)?, mode)
    }

    pub fn forward(&self, x1: &Tensor, x2: &Tensor, mode: Mode) -> Result<ViewOutputs> {
        let z1 = self.project(x1, mode)?;
        let z2 = self.project(x2, mode)?;
        Ok(ViewOutputs {
            p1: self.predictor.forward(&z1, mode)?,
            p2: self.predictor.forward(&z2, mode)?,
            z1,
            z2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSiamConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiply `base_lr` by `batch_size / 256`.
    pub scale_lr: bool,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Epochs at which the lr drops; defaults to 65% and 85% of the run.
    pub milestones: Option<Vec<usize>>,
    pub gamma: f64,
    pub view_size: u32,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub workers: usize,
    /// Replaces the default two-view augmentation.
    pub augment: Option<AugmentSpec>,
}

impl Default for SimSiamConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            base_lr: 0.05,
            scale_lr: true,
            weight_decay: 1e-5,
            momentum: 0.9,
            epochs: 400,
            milestones: None,
            gamma: 0.1,
            view_size: 224,
            seed: 0,
            max_steps: None,
            workers: 1,
            augment: None,
        }
    }
}

impl SimSiamConfig {
    pub fn effective_lr(&self) -> f64 {
        if self.scale_lr {
            scale_lr(self.base_lr, self.batch_size)
        } else {
            self.base_lr
        }
    }

    pub fn schedule(&self) -> MultiStep {
        let mut s = MultiStep::default_for(self.effective_lr(), self.epochs);
        if let Some(m) = &self.milestones {
            s.milestones = m.clone();
        }
        s.gamma = self.gamma;
        s
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        self.augment
            .clone()
            .unwrap_or_else(|| AugmentSpec::simsiam(self.view_size, self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::config("SimSiam needs batch_size >= 2 and epochs >= 1"));
        }
        if !(self.base_lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr must be positive; momentum and weight decay non-negative"));
        }
        self.schedule().validate(self.epochs)?;
        self.augment_spec().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSiamEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub collapse_metric: f64,
}

pub fn simsiam_history_csv(history: &[SimSiamEpoch]) -> String {
    let mut out = String::from("epoch,loss,lr,collapse_metric\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch,
            fmt_f64(h.loss),
            fmt_f64(h.lr),
            fmt_f64(h.collapse_metric)
        ));
    }
    out
}

pub struct SimSiamOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<SimSiamEpoch>,
    pub warnings: Vec<String>,
    pub transplant: Option<TransplantReport>,
    pub steps: usize,
}

/// Trains backbone, projector and predictor on two augmented views per
/// image. On a non-finite loss the model is rolled back to the start of the
/// failing epoch and `Error::NonFinite` is returned.
pub fn train_simsiam(
    model: &SimSiamModel,
    data: &dyn UnlabeledImages,
    generalist: Option<&Checkpoint>,
    dataset_name: &str,
    cfg: &SimSiamConfig,
) -> Result<SimSiamOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("SimSiam dataset is empty"));
    }
    let transplant = generalist
        .map(|g| load_backbone(&model.ps, g, TransplantMode::Strict))
        .transpose()?;
    let schedule = cfg.schedule();
    let augment = cfg.augment_spec();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, DecayPolicy::SkipNormAndBias);
    let threshold = collapse_threshold(model.dims.out);
    let indices: Vec<usize> = (0..data.len()).collect();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut warnings = Vec::new();
    let mut low_streak = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let start = model.ps.snapshot()?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut embeddings: Vec<Vec<f64>> = Vec::new();
        // Batch norm needs more than one row; a trailing single image is dropped.
        for batch in epoch_batches(&indices, cfg.batch_size, cfg.seed, epoch, false) {
            if step >= max_steps || batch.len() < 2 {
                break;
            }
            let views = parallel_map(&batch, cfg.workers, |&i| augment.two_views(&data.load(i)?, stream(epoch, i)).map_err(Error::from))?;
            let (v1, v2): (Vec<_>, Vec<_>) = views.into_iter().unzip();
            let x1 = images_to_tensor(&v1, &model.normalization, model.ps.dtype(), model.ps.device())?;
            let x2 = images_to_tensor(&v2, &model.normalization, model.ps.dtype(), model.ps.device())?;
            let out = model.forward(&x1, &x2, Mode::Train)?;
            let loss = simsiam_loss(&out.p1, &out.p2, &out.z1, &out.z2)?;
            let value = scalar(&loss)?;
            if let Err(e) = check_finite(value, step) {
                model.ps.restore(&start)?;
                return Err(e);
            }
            opt.step(&model.ps, &loss.backward()?, lr)?;
            embeddings.extend(out.z1.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?);
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            break;
        }
        let loss = loss_sum / batches as f64;
        let collapse = if embeddings.len() >= 2 { collapse_metric(&embeddings)? } else { f64::NAN };
        log::info!("epoch {epoch}: loss {loss:.4} lr {lr:.3e} collapse {collapse:.4}");
        history.push(SimSiamEpoch {
            epoch,
            loss,
            lr,
            collapse_metric: collapse,
        });
        if collapse < threshold {
            low_streak += 1;
            if low_streak == 5 {
                let msg = format!(
                    "collapse metric below {threshold:.4} for 5 consecutive epochs (epoch {epoch}: {collapse:.4})"
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        } else {
            low_streak = 0;
        }
    }

    let mut meta = CheckpointMeta::new(Method::Simsiam, dataset_name, model.backbone.spec().variant.clone());
    meta.epochs = history.len() as u64;
    meta.normalization = model.normalization.clone();
    meta.extra.insert("effective_lr".into(), cfg.effective_lr().into());
    Ok(SimSiamOutcome {
        checkpoint: model.ps.to_checkpoint(meta)?,
        history,
        warnings,
        transplant,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn negcos_trivial_cases() {
        assert!((negcos(&[1.0, 2.0], &[1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(negcos(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((negcos(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(negcos(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn batch_form_matches_scalar_form() {
        let p = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.5, -1.0, 0.0]], &Device::Cpu).unwrap();
        let z = Tensor::new(&[[3.0f64, 2.0, 1.0], [1.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        let want = (negcos(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap()
            + negcos(&[0.5, -1.0, 0.0], &[1.0, 1.0, 1.0]).unwrap())
            / 2.0;
        let got = negcos_batch(&p, &z).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - want).abs() < 1e-12);
        let zero = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(negcos_batch(&p, &zero), Err(Error::ZeroNorm)));
    }

    #[test]
    fn collapse_metric_cases() {
        let same = vec![vec![1.0, 2.0, 3.0]; 4];
        assert_eq!(collapse_metric(&same).unwrap(), 0.0);
        let d = 8;
        let basis: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let df = d as f64;
        let want = ((1.0 / df) * (1.0 - 1.0 / df) * df / (df - 1.0)).sqrt();
        assert!((collapse_metric(&basis).unwrap() - want).abs() < 1e-12);
        assert!(collapse_metric(&same[..1]).is_err());
    }

    #[test]
    fn default_schedule() {
        let cfg = SimSiamConfig::default();
        assert!((cfg.effective_lr() - 0.025).abs() < 1e-15);
        assert_eq!(cfg.schedule().milestones, vec![260, 340]);
        assert!(cfg.validate().is_ok());
    }
}

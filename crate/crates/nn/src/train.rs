//! Pieces shared by the training loops.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use geopretrain_core::checkpoint::{transplant_backbone, Checkpoint, TransplantMode, TransplantReport};

use crate::params::ParamStore;
use crate::{Error, Result};

/// Augmentation stream for sample `index` in `epoch`.
pub fn stream(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn check_finite(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// Copies the backbone arrays of `source` into matching `backbone.` (or
/// `det_backbone.`) parameters of the store.
pub fn load_backbone(ps: &ParamStore, source: &Checkpoint, mode: TransplantMode) -> Result<TransplantReport> {
    let target = ps.to_checkpoint(source.meta.clone())?;
    let (filled, report) = transplant_backbone(source, &target, mode)?;
    let matched: BTreeMap<&String, _> = report
        .matched
        .iter()
        .map(|(_, t)| (t, &filled.arrays[t]))
        .collect();
    ps.load_arrays(matched)?;
    Ok(report)
}

/// Formats a float for history files. Shortest round-trip form, so reruns
/// with identical state produce identical bytes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

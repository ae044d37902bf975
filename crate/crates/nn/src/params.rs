//! Named, seeded parameter storage.
//!
//! Every parameter is created from its own generator, derived from the
//! store seed and the parameter name, so initial values do not depend on
//! construction order. Names are the checkpoint keys.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use geopretrain_core::checkpoint::{Array, ArrayData, Checkpoint, CheckpointError, CheckpointMeta};
use geopretrain_core::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale or shift.
    Norm,
    /// Running statistics; saved but never optimized.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
}

pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            seed,
            dtype,
            device,
            params: BTreeMap::new(),
        }
    }

    pub fn cpu(seed: u64) -> Self {
        Self::new(seed, DType::F32, Device::Cpu)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a parameter, or returns the existing one after checking its
    /// shape.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Tensor> {
        if let Some(p) = self.params.get(name) {
            if p.var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` exists with shape {:?}, requested {shape:?}",
                    p.var.dims()
                )));
            }
            return Ok(p.var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = seed::rng(seed::derive(self.seed, name));
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, kind });
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values in non-buffer parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| k.starts_with(prefix) && p.kind != ParamKind::Buffer)
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    /// Optimizable parameters, minus those whose name starts with any of
    /// `frozen`.
    pub fn trainable<'a>(&'a self, frozen: &'a [String]) -> impl Iterator<Item = (&'a str, &'a Param)> + 'a {
        self.iter()
            .filter(|(_, p)| p.kind != ParamKind::Buffer)
            .filter(move |(k, _)| !frozen.iter().any(|f| k.starts_with(f.as_str())))
    }

    /// Values of every parameter under `prefix` as f32 checkpoint arrays.
    pub fn export(&self, prefix: &str) -> Result<BTreeMap<String, Array>> {
        let mut out = BTreeMap::new();
        for (k, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let t = p.var.as_tensor();
            let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            out.insert(k.clone(), Array::f32(t.dims().to_vec(), data)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(meta);
        for (k, a) in self.export("")? {
            ckpt.insert(k, a)?;
        }
        Ok(ckpt)
    }

    /// Overwrites parameters with same-named checkpoint arrays. Keys absent
    /// from the store are returned; a shape mismatch is an error.
    pub fn load_arrays<'a>(&self, arrays: impl IntoIterator<Item = (&'a String, &'a Array)>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, a) in arrays {
            let Some(p) = self.params.get(k) else {
                unknown.push(k.clone());
                continue;
            };
            if p.var.dims() != a.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{k}`: checkpoint {:?} vs model {:?}",
                    a.shape,
                    p.var.dims()
                )));
            }
            let t = match &a.data {
                ArrayData::F32(v) => Tensor::from_slice(v, a.shape.as_slice(), &self.device)?,
                ArrayData::F64(v) => Tensor::from_slice(v, a.shape.as_slice(), &self.device)?,
            };
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(unknown)
    }

    /// Loads every parameter from `ckpt`. Missing keys are an error; extra
    /// checkpoint keys are ignored.
    pub fn load_complete(&self, ckpt: &Checkpoint) -> Result<()> {
        let missing: Vec<String> = self.names().filter(|k| !ckpt.arrays.contains_key(*k)).map(String::from).collect();
        if !missing.is_empty() {
            return Err(CheckpointError::MissingKeys(missing).into());
        }
        self.load_arrays(ckpt.arrays.iter().filter(|(k, _)| self.params.contains_key(k.as_str())))?;
        Ok(())
    }

    /// Deep copy of all current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in snapshot {
            if let Some(p) = self.params.get(k) {
                p.var.set(t)?;
            }
        }
        Ok(())
    }
}

//! Classification and SimSiam heads.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::layers::{global_avg_pool, BatchNorm, Linear, Mode};
use crate::params::ParamStore;
use crate::Result;

/// Global average pooling plus one linear layer, at `head.classifier`.
pub struct ClassifierHead {
    fc: Linear,
}

impl ClassifierHead {
    pub fn new(ps: &mut ParamStore, in_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(ps, "head.classifier", in_channels, num_classes, true)?,
        })
    }

    /// C5 feature map to N x K logits.
    pub fn forward(&self, c5: &Tensor) -> Result<Tensor> {
        self.fc.forward(&global_avg_pool(c5)?.flatten_from(1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSiamDims {
    pub hidden: usize,
    pub out: usize,
    pub pred_hidden: usize,
}

impl SimSiamDims {
    pub fn standard() -> Self {
        Self {
            hidden: 2048,
            out: 2048,
            pred_hidden: 512,
        }
    }

    pub fn tiny() -> Self {
        Self {
            hidden: 64,
            out: 64,
            pred_hidden: 16,
        }
    }

    pub fn for_variant(variant: &str) -> Self {
        if variant == "tiny" {
            Self::tiny()
        } else {
            Self::standard()
        }
    }
}

/// Three linear layers, each followed by batch norm; ReLU between them.
/// The last norm has no affine parameters.
pub struct Projector {
    layers: Vec<(Linear, BatchNorm)>,
}

impl Projector {
    pub fn new(ps: &mut ParamStore, in_dim: usize, dims: SimSiamDims) -> Result<Self> {
        let widths = [(in_dim, dims.hidden), (dims.hidden, dims.hidden), (dims.hidden, dims.out)];
        let mut layers = Vec::with_capacity(3);
        for (i, (cin, cout)) in widths.into_iter().enumerate() {
            let fc = Linear::new(ps, &format!("projector.{i}"), cin, cout, false)?;
            let bn = BatchNorm::with_affine(ps, &format!("projector.bn{i}"), cout, i < 2)?;
            layers.push((fc, bn));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, (fc, bn)) in self.layers.iter().enumerate() {
            y = bn.forward(&fc.forward(&y)?, mode)?;
            if i + 1 < self.layers.len() {
                y = y.relu()?;
            }
        }
        Ok(y)
    }
}

/// Bottleneck MLP: linear, norm, ReLU, linear with bias.
pub struct Predictor {
    fc0: Linear,
    bn0: BatchNorm,
    fc1: Linear,
}

impl Predictor {
    pub fn new(ps: &mut ParamStore, dims: SimSiamDims) -> Result<Self> {
        Ok(Self {
            fc0: Linear::new(ps, "predictor.0", dims.out, dims.pred_hidden, false)?,
            bn0: BatchNorm::new(ps, "predictor.bn0", dims.pred_hidden)?,
            fc1: Linear::new(ps, "predictor.1", dims.pred_hidden, dims.out, true)?,
        })
    }

    pub fn forward(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn0.forward(&self.fc0.forward(z)?, mode)?.relu()?;
        self.fc1.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn head_shapes_and_names() {
        let mut ps = ParamStore::cpu(0);
        let dims = SimSiamDims::tiny();
        let proj = Projector::new(&mut ps, 128, dims).unwrap();
        let pred = Predictor::new(&mut ps, dims).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 128), &Device::Cpu).unwrap();
        let z = proj.forward(&x, Mode::Train).unwrap();
        assert_eq!(z.dims(), &[4, 64]);
        assert_eq!(pred.forward(&z, Mode::Train).unwrap().dims(), &[4, 64]);
        assert!(ps.get("projector.bn2.weight").is_none());
        assert!(ps.get("projector.bn2.running_mean").is_some());
        assert!(ps.get("predictor.1.bias").is_some());
        assert!(ps.get("predictor.0.bias").is_none());

        let head = ClassifierHead::new(&mut ps, 128, 5).unwrap();
        let c5 = Tensor::zeros((2, 128, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(head.forward(&c5).unwrap().dims(), &[2, 5]);
    }
}

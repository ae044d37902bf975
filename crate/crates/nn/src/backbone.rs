//! Bottleneck ResNet backbones emitting C2..C5.
//!
//! Parameter names follow `backbone.stem.conv`, `backbone.stageN.i.convK`,
//! `backbone.stageN.i.downsample.conv`, each with a matching `bn`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::layers::{max_pool_3x3_s2, BatchNorm, Conv2d, ConvCfg, Mode};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub variant: String,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks: [usize; 4],
    /// Output-to-bottleneck width ratio.
    pub expansion: usize,
}

impl BackboneSpec {
    pub fn resnet50() -> Self {
        Self {
            variant: "resnet50".into(),
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            blocks: [3, 4, 6, 3],
            expansion: 4,
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: "tiny".into(),
            stem_channels: 8,
            stage_channels: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            expansion: 4,
        }
    }

    pub fn from_variant(name: &str) -> Result<Self> {
        match name {
            "resnet50" => Ok(Self::resnet50()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown backbone variant `{other}` (expected resnet50 or tiny)"
            ))),
        }
    }

    /// Cumulative strides of C2..C5.
    pub fn stage_strides(&self) -> [usize; 4] {
        [4, 8, 16, 32]
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.expansion == 0 || self.blocks.contains(&0) {
            return Err(Error::config("backbone widths and block counts must be positive"));
        }
        if self.stage_channels.iter().any(|&c| c == 0 || c % self.expansion != 0) {
            return Err(Error::config(format!(
                "stage channels {:?} must be positive multiples of the expansion {}",
                self.stage_channels, self.expansion
            )));
        }
        Ok(())
    }
}

/// Errors unless both sides are multiples of 32.
pub fn check_aligned(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
        let up = |v: usize| v.div_ceil(32).max(1) * 32;
        return Err(Error::InputNotAligned {
            height,
            width,
            padded_height: up(height),
            padded_width: up(width),
        });
    }
    Ok(())
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, width: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(ps, &format!("{name}.downsample.conv"), cin, cout, ConvCfg::k(1).stride(stride))?,
                BatchNorm::new(ps, &format!("{name}.downsample.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, width, ConvCfg::k(1))?,
            bn1: BatchNorm::new(ps, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), width, width, ConvCfg::k(3).stride(stride))?,
            bn2: BatchNorm::new(ps, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(ps, &format!("{name}.conv3"), width, cout, ConvCfg::k(1))?,
            bn3: BatchNorm::new(ps, &format!("{name}.bn3"), cout)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

pub struct Backbone {
    spec: BackboneSpec,
    prefix: String,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
}

impl Backbone {
    /// Registers parameters under `prefix` (normally `backbone`).
    pub fn new(ps: &mut ParamStore, prefix: &str, spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let stem_conv = Conv2d::new(
            ps,
            &format!("{prefix}.stem.conv"),
            3,
            spec.stem_channels,
            ConvCfg::k(7).stride(2),
        )?;
        let stem_bn = BatchNorm::new(ps, &format!("{prefix}.stem.bn"), spec.stem_channels)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = spec.stem_channels;
        for (s, (&cout, &n)) in spec.stage_channels.iter().zip(&spec.blocks).enumerate() {
            let width = cout / spec.expansion;
            let mut blocks = Vec::with_capacity(n);
            for i in 0..n {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.{i}", s + 1);
                blocks.push(Bottleneck::new(ps, &name, cin, cout, width, stride)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self {
            spec: spec.clone(),
            prefix: prefix.to_string(),
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Parameter-name prefixes of the stem and the first `n - 1` stages,
    /// i.e. what `freeze_stages = n` holds fixed.
    pub fn frozen_prefixes(&self, n: usize) -> Vec<String> {
        let mut out = Vec::new();
        if n >= 1 {
            out.push(format!("{}.stem.", self.prefix));
        }
        for s in 1..n.min(5) {
            out.push(format!("{}.stage{s}.", self.prefix));
        }
        out
    }

    /// Returns `[C2, C3, C4, C5]` at strides 4, 8, 16 and 32.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_aligned(h, w)?;
        let y = self.stem_bn.forward(&self.stem_conv.forward(x)?, mode)?.relu()?;
        let mut y = max_pool_3x3_s2(&y)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, mode)?;
            }
            feats.push(y.clone());
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn tiny_pyramid_shapes() {
        let mut ps = ParamStore::cpu(0);
        let spec = BackboneSpec::tiny();
        let bb = Backbone::new(&mut ps, "backbone", &spec).unwrap();
        let x = Tensor::zeros((1, 3, 64, 96), DType::F32, &Device::Cpu).unwrap();
        let feats = bb.forward(&x, Mode::Eval).unwrap();
        for ((f, &c), &s) in feats.iter().zip(&spec.stage_channels).zip(&spec.stage_strides()) {
            assert_eq!(f.dims(), &[1, c, 64 / s, 96 / s]);
        }
    }

    #[test]
    fn misaligned_input_suggests_padding() {
        let err = check_aligned(2450, 2448).unwrap_err().to_string();
        assert!(err.contains("2464x2464"), "{err}");
        assert!(check_aligned(1024, 64).is_ok());
    }

    #[test]
    fn parameter_names() {
        let mut ps = ParamStore::cpu(0);
        Backbone::new(&mut ps, "backbone", &BackboneSpec::resnet50()).unwrap();
        for k in [
            "backbone.stem.conv.weight",
            "backbone.stage1.0.downsample.conv.weight",
            "backbone.stage3.5.bn3.running_var",
            "backbone.stage4.2.conv2.weight",
        ] {
            assert!(ps.get(k).is_some(), "{k}");
        }
        // torchvision ResNet-50 without the classifier: 23,508,032 parameters.
        assert_eq!(ps.count("backbone."), 23_508_032);
    }
}

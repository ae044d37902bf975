//! Convolution, normalization, linear and pooling building blocks.

use std::cell::Cell;

use candle_core::{DType, Tensor, Var, D};

use crate::params::{Init, ParamKind, ParamStore};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with parameters detached, so no autograd graph is recorded and
/// intermediate activations are freed as soon as they are consumed.
/// Applies to the calling thread only.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|g| g.replace(true)));
    f()
}

pub fn grad_enabled() -> bool {
    !NO_GRAD.with(|g| g.get())
}

fn param(t: &Tensor) -> Tensor {
    if grad_enabled() {
        t.clone()
    } else {
        t.detach()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvCfg {
    pub fn k(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.kernel / 2);
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    cfg: ConvCfg,
}

impl Conv2d {
    /// Kaiming-normal weights in fan-out mode; bias zero.
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: ConvCfg) -> Result<Self> {
        let fan_out = cout * cfg.kernel * cfg.kernel;
        let weight = ps.get_or_init(
            &format!("{name}.weight"),
            &[cout, cin, cfg.kernel, cfg.kernel],
            Init::Normal {
                std: (2.0 / fan_out as f64).sqrt(),
            },
            ParamKind::Weight,
        )?;
        let bias = if cfg.bias {
            Some(ps.get_or_init(&format!("{name}.bias"), &[cout], Init::Const(0.0), ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self { weight, bias, cfg })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&param(&self.weight), self.cfg.padding, self.cfg.stride, self.cfg.dilation, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param(b).reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalization over all axes except the channel axis (dim 1).
/// Works for N x C and N x C x H x W inputs.
pub struct BatchNorm {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    mean: Var,
    var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Self::with_affine(ps, name, channels, true)
    }

    pub fn with_affine(ps: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Result<Self> {
        let (weight, bias) = if affine {
            (
                Some(ps.get_or_init(&format!("{name}.weight"), &[channels], Init::Const(1.0), ParamKind::Norm)?),
                Some(ps.get_or_init(&format!("{name}.bias"), &[channels], Init::Const(0.0), ParamKind::Norm)?),
            )
        } else {
            (None, None)
        };
        let mean = ps.get_or_init(&format!("{name}.running_mean"), &[channels], Init::Const(0.0), ParamKind::Buffer)?;
        let var = ps.get_or_init(&format!("{name}.running_var"), &[channels], Init::Const(1.0), ParamKind::Buffer)?;
        Ok(Self {
            weight,
            bias,
            mean: Var::from_tensor(&mean)?,
            var: Var::from_tensor(&var)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn stat_shape(&self, x: &Tensor) -> Vec<usize> {
        let mut shape = vec![1; x.rank()];
        shape[1] = x.dim(1).unwrap_or(1);
        shape
    }

    /// In training mode, normalizes with batch statistics and folds them
    /// into the running estimates.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = self.stat_shape(x);
        let c = x.dim(1)?;
        let (mean, var) = if mode.is_train() {
            // Move the channel axis first, then reduce over everything else.
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
            let n = flat.dim(1)?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
            if n > 1 {
                let m = self.momentum;
                let mean_d = mean.detach().flatten_all()?;
                let unbiased = (var.detach().flatten_all()? * (n as f64 / (n - 1) as f64))?;
                let new_mean = ((self.mean.as_tensor() * (1.0 - m))? + (mean_d * m)?)?;
                let new_var = ((self.var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.mean.set(&new_mean)?;
                self.var.set(&new_var)?;
            }
            (mean.reshape(shape.as_slice())?, var.reshape(shape.as_slice())?)
        } else {
            (
                param(self.mean.as_tensor()).reshape(shape.as_slice())?,
                param(self.var.as_tensor()).reshape(shape.as_slice())?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = match &self.weight {
            Some(w) => xhat.broadcast_mul(&param(w).reshape(shape.as_slice())?)?,
            None => xhat,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param(b).reshape(shape.as_slice())?)?,
            None => y,
        })
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and bias.
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = ps.get_or_init(&format!("{name}.weight"), &[cout, cin], Init::Uniform { bound }, ParamKind::Weight)?;
        let bias = if bias {
            Some(ps.get_or_init(&format!("{name}.bias"), &[cout], Init::Uniform { bound }, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&param(&self.weight).t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param(b))?,
            None => y,
        })
    }
}

/// 3x3 stride-2 max pooling with one pixel of padding. Inputs must be
/// non-negative (post-ReLU) with even height and width; zero padding then
/// matches negative-infinity padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let rows = strided_max(&x, 2, h / 2)?;
    strided_max(&rows, 3, w / 2)
}

/// out[i] = max(x[2i], x[2i+1], x[2i+2]) along `dim`.
fn strided_max(x: &Tensor, dim: usize, out: usize) -> Result<Tensor> {
    let pick = |offset: usize| -> Result<Tensor> {
        let s = x.narrow(dim, offset, 2 * out)?;
        let mut shape = s.dims().to_vec();
        shape[dim] = out;
        shape.insert(dim + 1, 2);
        Ok(s.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
    };
    Ok(pick(0)?.maximum(&pick(1)?)?.maximum(&pick(2)?)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(3)?.mean_keepdim(2)?)
}

/// Interpolation matrix for 1-D bilinear resizing with half-pixel centers
/// (`align_corners = false`), shape `out x inp`.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let w1 = src - i0 as f64;
        m[i * inp + i0] += 1.0 - w1;
        m[i * inp + i1] += w1;
    }
    m
}

/// Bilinear resize of N x C x H x W to `out_h x out_w` as two matrix
/// products, so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let awt = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let y = x.contiguous()?.broadcast_matmul(&awt)?;
    Ok(ah.broadcast_matmul(&y)?)
}

/// Per-element cross-entropy of class logits along dim 1 against integer
/// targets with the same layout minus that axis. Returns the mean.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    let k = logits.dim(1)?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let onehot = one_hot(targets, k, logits.dtype())?;
    let picked = (logp * &onehot)?.sum_keepdim(1)?;
    match weights {
        None => Ok(picked.mean_all()?.neg()?),
        Some(w) => {
            let mut shape = vec![1; logits.rank()];
            shape[1] = k;
            let pw = onehot.broadcast_mul(&w.reshape(shape)?)?.sum_keepdim(1)?;
            Ok((picked * &pw)?.sum_all()?.neg()?.broadcast_div(&pw.sum_all()?)?)
        }
    }
}

/// One-hot encoding, inserting the class axis at dim 1.
pub fn one_hot(targets: &Tensor, k: usize, dtype: DType) -> Result<Tensor> {
    let t = targets.to_dtype(DType::U32)?.unsqueeze(1)?;
    let mut shape = t.dims().to_vec();
    shape[1] = k;
    let classes = Tensor::arange(0u32, k as u32, targets.device())?;
    let mut cshape = vec![1; shape.len()];
    cshape[1] = k;
    let classes = classes.reshape(cshape)?.broadcast_as(shape.as_slice())?;
    Ok(t.broadcast_as(shape.as_slice())?.eq(&classes)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn max_pool_matches_naive() {
        let dev = Device::Cpu;
        let vals: Vec<f32> = (0..2 * 3 * 8 * 6).map(|i| ((i * 37) % 23) as f32).collect();
        let x = Tensor::from_vec(vals.clone(), (2, 3, 8, 6), &dev).unwrap();
        let y = max_pool_3x3_s2(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 4, 3]);
        let y = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let at = |n: usize, c: usize, i: i64, j: i64| -> f32 {
            if i < 0 || j < 0 || i >= 8 || j >= 6 {
                f32::MIN
            } else {
                vals[((n * 3 + c) * 8 + i as usize) * 6 + j as usize]
            }
        };
        let mut k = 0;
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4i64 {
                    for j in 0..3i64 {
                        let mut m = f32::MIN;
                        for di in -1..=1 {
                            for dj in -1..=1 {
                                m = m.max(at(n, c, 2 * i + di, 2 * j + dj));
                            }
                        }
                        assert_eq!(y[k], m);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity() {
        for (o, i) in [(32, 1), (64, 2), (5, 7), (1024, 32)] {
            let m = bilinear_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let m = bilinear_matrix(4, 4);
        for r in 0..4 {
            assert_eq!(m[r * 4 + r], 1.0);
        }
        // Doubling 2 pixels: half-pixel centers give weights 1, .75/.25, .25/.75, 1.
        assert_eq!(bilinear_matrix(4, 2), vec![1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let dev = Device::Cpu;
        for k in [2usize, 4, 7, 45] {
            let logits = Tensor::zeros((3, k), DType::F64, &dev).unwrap();
            let t = Tensor::new(&[0u32, 1, (k - 1) as u32], &dev).unwrap();
            let ce = cross_entropy(&logits, &t, None).unwrap().to_scalar::<f64>().unwrap();
            assert!((ce - (k as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn no_grad_records_no_graph() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::cpu(0);
        let lin = Linear::new(&mut ps, "l", 3, 2, true).unwrap();
        let x = Tensor::ones((4, 3), DType::F32, &dev).unwrap();
        let w = ps.get("l.weight").unwrap().var.as_tensor().clone();
        let tracked = lin.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(tracked.get(&w).is_some());
        let (y, inside) = no_grad(|| (lin.forward(&x).unwrap(), grad_enabled()));
        assert!(!inside && grad_enabled());
        let grads = y.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&w).is_none());
        let again = lin.forward(&x).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), again.to_vec2::<f32>().unwrap());
    }
}

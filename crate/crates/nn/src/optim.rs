//! SGD with momentum and Adam, both with L2 weight decay added to the
//! gradient. Parameters without a gradient are left alone.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::params::{ParamKind, ParamStore};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayPolicy {
    All,
    /// No decay on normalization parameters and biases.
    SkipNormAndBias,
}

impl DecayPolicy {
    pub fn applies(self, kind: ParamKind) -> bool {
        match self {
            DecayPolicy::All => kind != ParamKind::Buffer,
            DecayPolicy::SkipNormAndBias => kind == ParamKind::Weight,
        }
    }
}

pub trait Optimizer {
    fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()>;
}

/// Splits trainable names into (decayed, not decayed).
pub fn decay_groups(ps: &ParamStore, frozen: &[String], policy: DecayPolicy) -> (Vec<String>, Vec<String>) {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for (name, p) in ps.trainable(frozen) {
        if policy.applies(p.kind) {
            with.push(name.to_string());
        } else {
            without.push(name.to_string());
        }
    }
    (with, without)
}

pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub policy: DecayPolicy,
    pub frozen: Vec<String>,
    buffers: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, policy: DecayPolicy) -> Self {
        Self {
            momentum,
            weight_decay,
            policy,
            frozen: Vec::new(),
            buffers: HashMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, p) in ps.trainable(&self.frozen) {
            let value = p.var.as_tensor();
            let Some(g) = grads.get(value) else { continue };
            let mut d = g.detach();
            if self.weight_decay != 0.0 && self.policy.applies(p.kind) {
                d = (d + (value.detach() * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                d = match self.buffers.get(name) {
                    Some(buf) => ((buf * self.momentum)? + d)?,
                    None => d,
                };
                self.buffers.insert(name.to_string(), d.clone());
            }
            p.var.set(&(value.detach() - (d * lr)?)?)?;
        }
        Ok(())
    }
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub policy: DecayPolicy,
    pub frozen: Vec<String>,
    state: HashMap<String, (Tensor, Tensor, i32)>,
}

impl Adam {
    pub fn new(weight_decay: f64, policy: DecayPolicy) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            policy,
            frozen: Vec::new(),
            state: HashMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, p) in ps.trainable(&self.frozen) {
            let value = p.var.as_tensor();
            let Some(g) = grads.get(value) else { continue };
            let mut g = g.detach();
            if self.weight_decay != 0.0 && self.policy.applies(p.kind) {
                g = (g + (value.detach() * self.weight_decay)?)?;
            }
            let (m, v, t) = match self.state.remove(name) {
                Some((m, v, t)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                    t + 1,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?, 1),
            };
            let mhat = (&m / (1.0 - self.beta1.powi(t)))?;
            let vhat = (&v / (1.0 - self.beta2.powi(t)))?;
            let update = (mhat / (vhat.sqrt()? + self.eps)?)?;
            p.var.set(&(value.detach() - (update * lr)?)?)?;
            self.state.insert(name.to_string(), (m, v, t));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store() -> (ParamStore, Tensor, Tensor) {
        let mut ps = ParamStore::cpu(0);
        let w = ps.get_or_init("head.w", &[3], Init::Uniform { bound: 1.0 }, ParamKind::Weight).unwrap();
        let b = ps.get_or_init("head.bn.weight", &[3], Init::Const(1.0), ParamKind::Norm).unwrap();
        ps.get_or_init("head.bn.running_mean", &[3], Init::Const(0.0), ParamKind::Buffer).unwrap();
        (ps, w, b)
    }

    fn loss_grads(w: &Tensor, b: &Tensor) -> GradStore {
        ((w * b).unwrap().sqr().unwrap().sum_all().unwrap()).backward().unwrap()
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (ps, w, b) = store();
        let before = ps.snapshot().unwrap();
        let grads = loss_grads(&w, &b);
        Sgd::new(0.9, 1e-5, DecayPolicy::SkipNormAndBias).step(&ps, &grads, 0.0).unwrap();
        Adam::new(1e-4, DecayPolicy::All).step(&ps, &grads, 0.0).unwrap();
        for (k, t) in before {
            let now = ps.get(&k).unwrap().var.as_tensor().to_vec1::<f32>().unwrap();
            assert_eq!(now, t.to_vec1::<f32>().unwrap(), "{k}");
        }
    }

    #[test]
    fn sgd_matches_hand_update() {
        let (ps, w, b) = store();
        let w0 = w.to_vec1::<f32>().unwrap();
        let grads = loss_grads(&w, &b);
        let mut opt = Sgd::new(0.9, 0.1, DecayPolicy::All);
        opt.step(&ps, &grads, 0.5).unwrap();
        let w1 = w.to_vec1::<f32>().unwrap();
        for (a, b) in w0.iter().zip(&w1) {
            // d/dw (w b)^2 = 2 w with b = 1; plus decay 0.1 w.
            let want = a - 0.5 * (2.0 * a + 0.1 * a);
            assert!((b - want).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (ps, w, b) = store();
        let w0 = w.to_vec1::<f32>().unwrap();
        let grads = loss_grads(&w, &b);
        Adam::new(0.0, DecayPolicy::All).step(&ps, &grads, 0.01).unwrap();
        for (a, b) in w0.iter().zip(&w.to_vec1::<f32>().unwrap()) {
            assert!(((a - b).abs() - 0.01).abs() < 1e-5);
        }
    }

    #[test]
    fn grouping_excludes_norm_and_buffers() {
        let (ps, _, _) = store();
        let (with, without) = decay_groups(&ps, &[], DecayPolicy::SkipNormAndBias);
        assert_eq!(with, vec!["head.w"]);
        assert_eq!(without, vec!["head.bn.weight"]);
    }
}

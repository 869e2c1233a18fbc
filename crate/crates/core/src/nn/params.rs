use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::tensor::{Real, Tensor};

/// A trainable tensor together with its Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        Self { value, m, v }
    }

    pub fn moments(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m, &self.v)
    }
}

/// Named parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of Adam updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            m: p.m.cast(),
                            v: p.v.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    /// One Adam update with bias correction. L2 regularization adds
    /// `weight_decay * p` to each gradient before the moment update.
    pub fn adam_step(&mut self, grads: &Grads<T>, cfg: &AdamConfig) -> Result<()> {
        for (name, param) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Argument(format!("no gradient for `{name}`")))?;
            if g.shape() != param.value.shape() {
                return Err(Error::Argument(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    param.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let wd = T::from_f64(cfg.weight_decay);
        for (name, param) in self.params.iter_mut() {
            let g = grads.0[name].data();
            let p = param.value.data_mut();
            let m = param.m.data_mut();
            let v = param.v.data_mut();
            for i in 0..p.len() {
                let gi = if cfg.weight_decay != 0.0 {
                    g[i] + wd * p[i]
                } else {
                    g[i]
                };
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Writes values, moments and the step counter under `prefix`.
    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.meta.insert(format!("{prefix}step"), self.step);
        for (name, p) in &self.params {
            ckpt.tensors.insert(format!("{prefix}{name}"), p.value.cast());
            ckpt.tensors.insert(format!("{prefix}{name}#m"), p.m.cast());
            ckpt.tensors.insert(format!("{prefix}{name}#v"), p.v.cast());
        }
    }

    /// Restores a store exported with [`ParamStore::export`]. `template` fixes the
    /// expected names and shapes.
    pub fn import(ckpt: &Checkpoint, prefix: &str, template: &ParamStore<T>) -> Result<Self> {
        let step = *ckpt
            .meta
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Checkpoint(format!("missing `{prefix}step`")))?;
        let fetch = |key: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = ckpt
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint v{} has no tensor `{key}`", ckpt.version)))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "checkpoint v{} tensor `{key}` has shape {:?}, expected {shape:?}",
                    ckpt.version,
                    t.shape()
                )));
            }
            Ok(t.cast())
        };
        let mut params = BTreeMap::new();
        for (name, p) in &template.params {
            let shape = p.value.shape();
            params.insert(
                name.clone(),
                Param {
                    value: fetch(format!("{prefix}{name}"), shape)?,
                    m: fetch(format!("{prefix}{name}#m"), shape)?,
                    v: fetch(format!("{prefix}{name}#v"), shape)?,
                },
            );
        }
        let extra = ckpt
            .tensors
            .keys()
            .filter_map(|k| k.strip_prefix(prefix))
            .map(|k| k.split('#').next().unwrap_or(k))
            .find(|k| !template.params.contains_key(*k));
        if let Some(k) = extra {
            return Err(Error::Checkpoint(format!(
                "checkpoint v{} has unexpected tensor `{prefix}{k}`",
                ckpt.version
            )));
        }
        Ok(Self { params, step })
    }
}

/// Gradients keyed like the [`ParamStore`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T>(pub(crate) BTreeMap<String, Tensor<T>>);

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self(
            store
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape().to_vec())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.0.insert(name.into(), g);
    }

    /// Adds `other` into `self`, key by key.
    pub fn accumulate(&mut self, other: &Grads<T>) -> Result<()> {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![p]).unwrap());
        s
    }

    fn grad(g: f64) -> Grads<f64> {
        let mut gr = Grads(BTreeMap::new());
        gr.insert("p", Tensor::new(vec![1], vec![g]).unwrap());
        gr
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut s = scalar_store(0.7);
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        s.adam_step(&grad(3.0), &cfg).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[0.7]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [2.5, -0.01] {
            let mut s = scalar_store(1.0);
            let cfg = AdamConfig {
                lr: 0.01,
                weight_decay: 0.0,
                ..Default::default()
            };
            s.adam_step(&grad(g), &cfg).unwrap();
            let delta = s.get("p").unwrap().data()[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-8, "delta {delta}");
        }
    }

    /// Hand-rolled scalar Adam on f(p) = p^2.
    fn scalar_adam(mut p: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        let expected = scalar_adam(1.0, 0.1, 3);
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        for want in expected {
            let p = s.get("p").unwrap().data()[0];
            s.adam_step(&grad(2.0 * p), &cfg).unwrap();
            assert!((s.get("p").unwrap().data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_zero_is_plain_adam() {
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        for _ in 0..5 {
            let pa = a.get("p").unwrap().data()[0];
            a.adam_step(&grad(pa.sin()), &cfg).unwrap();
            let pb = b.get("p").unwrap().data()[0];
            b.adam_step(&grad(pb.sin()), &cfg).unwrap();
        }
        assert_eq!(a, b);
        let (m, v) = a.params["p"].moments();
        assert!(m.is_finite() && v.is_finite());
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        // With zero loss gradient, decay alone pushes p towards zero.
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut s = scalar_store(2.0);
        s.adam_step(&grad(0.0), &cfg).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 1.99).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite_and_mismatched_grads() {
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig::default();
        assert!(matches!(s.adam_step(&grad(f64::NAN), &cfg), Err(Error::Numeric(_))));
        let mut bad = Grads(BTreeMap::new());
        bad.insert("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(s.adam_step(&bad, &cfg), Err(Error::Argument(_))));
        assert_eq!(s.step(), 0);
    }
}

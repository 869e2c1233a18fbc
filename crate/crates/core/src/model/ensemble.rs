use std::path::Path;

use rand::Rng;

use super::config::EnsembleConfig;
use crate::data::{AnnotatedSample, Label, RegionInput};
use crate::error::{Error, Result};
use crate::nn::loss::{class_cross_entropy, cross_entropy_grad};
use crate::nn::{AdamConfig, Checkpoint, Grads, Network, ParamStore, ProbVector};
use crate::roialign::{image_to_feature_box, roi_align, roi_align_backward};
use crate::tensor::{Real, Tensor};

const EPOCH_KEY: &str = "epoch";

/// Shared trunk plus one independently parameterized head per region class.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T> {
    config: EnsembleConfig,
    trunk_net: Network,
    head_net: Network,
    pub trunk: ParamStore<T>,
    pub heads: Vec<ParamStore<T>>,
}

/// Gradients for every parameter of an [`EnsembleModel`].
#[derive(Debug, Clone)]
pub struct EnsembleGrads<T> {
    pub trunk: Grads<T>,
    pub heads: Vec<Grads<T>>,
}

impl<T: Real> EnsembleGrads<T> {
    pub fn zeros_like(model: &EnsembleModel<T>) -> Self {
        Self {
            trunk: Grads::zeros_like(&model.trunk),
            heads: model.heads.iter().map(Grads::zeros_like).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &EnsembleGrads<T>) -> Result<()> {
        self.trunk.accumulate(&other.trunk)?;
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.accumulate(b)?;
        }
        Ok(())
    }
}

/// Normalizes a network softmax output into a [`ProbVector`].
fn to_probs<T: Real>(out: &Tensor<T>) -> Result<ProbVector> {
    let v: Vec<f64> = out.data().iter().map(|x| x.as_f64()).collect();
    let s: f64 = v.iter().sum();
    ProbVector::new(v.into_iter().map(|x| x / s).collect())
}

impl<T: Real> EnsembleModel<T> {
    /// Fresh parameters: trunk first, then heads in order, all from `rng`.
    pub fn new(config: EnsembleConfig, rng: &mut impl Rng) -> Result<Self> {
        let trunk_net = config.trunk_network()?;
        let head_net = config.head_network()?;
        let trunk = trunk_net.init_params(rng);
        let heads = (0..config.num_regions).map(|_| head_net.init_params(rng)).collect();
        Ok(Self {
            config,
            trunk_net,
            head_net,
            trunk,
            heads,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn trunk_network(&self) -> &Network {
        &self.trunk_net
    }

    pub fn head_network(&self) -> &Network {
        &self.head_net
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn cast<U: Real>(&self) -> EnsembleModel<U> {
        EnsembleModel {
            config: self.config.clone(),
            trunk_net: self.trunk_net.clone(),
            head_net: self.head_net.clone(),
            trunk: self.trunk.cast(),
            heads: self.heads.iter().map(|h| h.cast()).collect(),
        }
    }

    fn check_image(&self, image: &Tensor<f32>) -> Result<Tensor<T>> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match the configured input [3, {s}, {s}]",
                image.shape()
            )));
        }
        Ok(image.cast())
    }

    /// Trunk feature map `[C_feat, S/stride, S/stride]`.
    pub fn extract_features(&self, image: &Tensor<f32>) -> Result<Tensor<T>> {
        let x = self.check_image(image)?;
        Ok(self.trunk_net.forward(&self.trunk, &x)?.0)
    }

    /// RoIAlign of an image-space box on a feature map.
    pub fn region_features(&self, features: &Tensor<T>, bbox: &crate::geometry::BBox) -> Result<Tensor<T>> {
        let fb = image_to_feature_box(bbox, self.config.stride())?;
        roi_align(features, &fb, &self.config.roi)
    }

    pub fn head_forward(&self, region_feats: &Tensor<T>, head_id: usize) -> Result<ProbVector> {
        let head = self
            .heads
            .get(head_id)
            .ok_or_else(|| Error::Argument(format!("head {head_id} out of range 0..{}", self.heads.len())))?;
        to_probs(&self.head_net.forward(head, region_feats)?.0)
    }

    /// One ProbVector per present region, computed from a single trunk pass.
    pub fn predict_regions(&self, image: &Tensor<f32>, regions: &[RegionInput]) -> Result<Vec<(usize, ProbVector)>> {
        let fm = self.extract_features(image)?;
        regions
            .iter()
            .filter(|r| r.present)
            .map(|r| {
                let f = self.region_features(&fm, &r.bbox)?;
                Ok((r.region_class, self.head_forward(&f, r.region_class)?))
            })
            .collect()
    }

    /// Ensemble loss of one sample over its present regions and the
    /// gradients of every parameter, including the path through RoIAlign
    /// into the trunk.
    pub fn loss_and_grads(&self, sample: &AnnotatedSample) -> Result<(f64, EnsembleGrads<T>)> {
        self.loss_and_grads_of(&self.check_image(&sample.image)?, &sample.regions, sample.label)
    }

    pub(crate) fn loss_and_grads_of(
        &self,
        image: &Tensor<T>,
        regions: &[RegionInput],
        label: Label,
    ) -> Result<(f64, EnsembleGrads<T>)> {
        if label.0 >= self.config.num_classes {
            return Err(Error::Argument(format!("label {} out of range", label.0)));
        }
        let mut grads = EnsembleGrads::zeros_like(self);
        let (fm, mut trunk_tape) = self.trunk_net.forward(&self.trunk, image)?;
        let mut grad_map = Tensor::zeros(fm.shape().to_vec());
        let mut loss = 0.0;
        for r in regions.iter().filter(|r| r.present) {
            let t = r.region_class;
            let head = self
                .heads
                .get(t)
                .ok_or_else(|| Error::Argument(format!("region class {t} has no head")))?;
            let fb = image_to_feature_box(&r.bbox, self.config.stride())?;
            let feats = roi_align(&fm, &fb, &self.config.roi)?;
            let (out, mut tape) = self.head_net.forward(head, &feats)?;
            let probs: Vec<f64> = out.data().iter().map(|x| x.as_f64()).collect();
            loss += class_cross_entropy(&probs, label.0);
            let g = Tensor::new(out.shape().to_vec(), cross_entropy_grad(out.data(), label.0))?;
            let back = self.head_net.backward(head, &mut tape, &g)?;
            grads.heads[t].accumulate(&back.grads)?;
            let gin = back.input_grad.expect("input gradient requested");
            roi_align_backward(&mut grad_map, &fb, &self.config.roi, &gin)?;
        }
        let back = self
            .trunk_net
            .backward_with(&self.trunk, &mut trunk_tape, &grad_map, false)?;
        grads.trunk = back.grads;
        Ok((loss, grads))
    }

    pub fn apply_grads(&mut self, grads: &EnsembleGrads<T>, adam: &AdamConfig) -> Result<()> {
        self.trunk.adam_step(&grads.trunk, adam)?;
        for (h, g) in self.heads.iter_mut().zip(&grads.heads) {
            h.adam_step(g, adam)?;
        }
        Ok(())
    }

    /// One joint Adam update from the batch-summed gradient. Returns the
    /// summed loss before the update.
    pub fn train_step(&mut self, batch: &[AnnotatedSample], adam: &AdamConfig) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        adam.validate()?;
        let mut total = EnsembleGrads::zeros_like(self);
        let mut loss = 0.0;
        for s in batch {
            let (l, g) = self.loss_and_grads(s)?;
            loss += l;
            total.accumulate(&g)?;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("batch loss is {loss}")));
        }
        self.apply_grads(&total, adam)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert(EPOCH_KEY.into(), epoch);
        ckpt.meta.insert("num_heads".into(), self.heads.len() as u64);
        self.trunk.export("trunk/", &mut ckpt);
        for (i, h) in self.heads.iter().enumerate() {
            h.export(&format!("head{i}/"), &mut ckpt);
        }
        ckpt
    }

    /// Restores parameters and optimizer state into a model built from the
    /// same config. Returns the stored epoch.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<u64> {
        let n = ckpt.meta.get("num_heads").copied();
        if n != Some(self.heads.len() as u64) {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n:?} heads, model has {}",
                self.heads.len()
            )));
        }
        let trunk = ParamStore::import(ckpt, "trunk/", &self.trunk)?;
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| ParamStore::import(ckpt, &format!("head{i}/"), h))
            .collect::<Result<Vec<_>>>()?;
        self.trunk = trunk;
        self.heads = heads;
        ckpt.meta
            .get(EPOCH_KEY)
            .copied()
            .ok_or_else(|| Error::Checkpoint("missing epoch".into()))
    }

    pub fn save(&self, path: &Path, epoch: u64) -> Result<()> {
        self.to_checkpoint(epoch).save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<u64> {
        self.load_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sums head probabilities per class; the label is the argmax with ties to
/// the smallest class index.
pub fn fuse(outputs: &[(usize, ProbVector)]) -> Result<(Label, Vec<f64>)> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Argument("nothing to fuse".into()))?;
    let c = first.1.len();
    let mut sum = vec![0.0; c];
    for (_, p) in outputs {
        if p.len() != c {
            return Err(Error::Argument("head outputs differ in class count".into()));
        }
        for (s, v) in sum.iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    Ok((Label(crate::nn::loss::argmax(&sum)), sum))
}

/// Sum of per-head cross-entropies against one shared label.
pub fn ensemble_loss(outputs: &[ProbVector], label: Label) -> Result<f64> {
    outputs
        .iter()
        .map(|p| {
            if label.0 >= p.len() {
                return Err(Error::Argument(format!("label {} out of range", label.0)));
            }
            Ok(class_cross_entropy(p.as_slice(), label.0))
        })
        .sum()
}

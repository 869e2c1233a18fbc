//! Epoch loop with per-(seed, epoch, sample) randomness, so an interrupted
//! run resumed from a checkpoint replays exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ensemble::EnsembleModel;
use crate::data::{basic_augment, jitter_sample, AnnotatedSample, AugmentOps, Dataset, JitterMode};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Region jitter applied to ground-truth boxes; `None` disables it.
    pub jitter: Option<JitterMode>,
    pub augment: AugmentOps,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.adam.validate()
    }
}

/// Per-step record written to the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: u64,
    pub step: u64,
    /// Batch loss divided by the batch size.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub steps: u64,
    pub mean_loss: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG for a tuple of indices under a master seed.
pub fn derived_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let s = path.iter().fold(splitmix(seed), |acc, &w| splitmix(acc ^ splitmix(w)));
    ChaCha8Rng::seed_from_u64(s)
}

const ORDER: u64 = 1;
const AUGMENT: u64 = 2;

/// Sample visiting order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, &[ORDER, epoch]));
    idx
}

/// Applies the configured augmentation and jitter to one training sample.
pub fn prepare_sample(
    sample: &AnnotatedSample,
    cfg: &TrainConfig,
    seed: u64,
    epoch: u64,
    index: usize,
) -> Result<AnnotatedSample> {
    let mut rng = derived_rng(seed, &[AUGMENT, epoch, index as u64]);
    let mut s = basic_augment(sample, &cfg.augment, &mut rng)?;
    if let Some(mode) = cfg.jitter {
        jitter_sample(&mut s, mode, &mut rng);
    }
    Ok(s)
}

/// Runs one epoch of mini-batch training; `on_step` sees every step.
pub fn train_epoch<T: Real>(
    model: &mut EnsembleModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    epoch: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let order = epoch_order(data.len(), seed, epoch);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch = chunk
            .iter()
            .map(|&i| prepare_sample(&data.samples[i], cfg, seed, epoch, i))
            .collect::<Result<Vec<_>>>()?;
        let loss = model.train_step(&batch, &cfg.adam)?;
        total += loss;
        on_step(&StepLog {
            epoch,
            step: steps,
            loss: loss / batch.len() as f64,
        });
        steps += 1;
    }
    Ok(EpochStats {
        epoch,
        steps,
        mean_loss: total / data.len() as f64,
    })
}

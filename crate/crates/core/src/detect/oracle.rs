use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Detector;
use crate::data::{jitter_region, AnnotatedSample, JitterMode, JitterParams};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::model::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Jitter applied to every emitted ground-truth box; `None` keeps boxes exact.
    pub jitter: Option<JitterMode>,
    /// Main detection scores are drawn from `[1 - score_spread, 1]`.
    pub score_spread: f64,
    /// Extra jittered copies per present region, scored below the original.
    pub duplicates: usize,
    /// Random boxes of random classes per image, scored in `[0, 0.5)`.
    pub distractors: usize,
    pub seed: u64,
}

impl OracleConfig {
    pub fn exact(seed: u64) -> Self {
        Self {
            jitter: None,
            score_spread: 0.0,
            duplicates: 0,
            distractors: 0,
            seed,
        }
    }
}

/// Replays ground truth with configurable noise.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDetector {
    pub config: OracleConfig,
    pub num_regions: usize,
}

impl OracleDetector {
    pub fn new(config: OracleConfig, num_regions: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.score_spread) {
            return Err(Error::Config(format!(
                "score_spread {} outside [0, 1]",
                config.score_spread
            )));
        }
        Ok(Self { config, num_regions })
    }
}

impl Detector for OracleDetector {
    fn detect(&self, sample: &AnnotatedSample, index: usize) -> Result<Vec<Detection>> {
        let cfg = &self.config;
        let mut rng = derived_rng(cfg.seed, &[index as u64]);
        let s = sample.image_size() as f64;
        let obj = sample.object_box;
        let perturb = |b: &BBox, rng: &mut ChaCha8Rng| match cfg.jitter {
            Some(mode) => jitter_region(b, &obj, &JitterParams::sample(rng, mode), s, s),
            None => *b,
        };
        let mut out = Vec::new();
        for r in sample.present_regions() {
            let score = 1.0 - cfg.score_spread * rng.random::<f64>();
            out.push(Detection::new(r.region_class, perturb(&r.bbox, &mut rng), score)?);
            for _ in 0..cfg.duplicates {
                let dup_score = score * rng.random_range(0.5..0.95);
                out.push(Detection::new(r.region_class, perturb(&r.bbox, &mut rng), dup_score)?);
            }
        }
        for _ in 0..cfg.distractors {
            let class = rng.random_range(0..self.num_regions.max(1));
            let w = rng.random_range(0.05..0.3) * s;
            let h = rng.random_range(0.05..0.3) * s;
            let x = rng.random_range(w / 2.0..=s - w / 2.0);
            let y = rng.random_range(h / 2.0..=s - h / 2.0);
            let score = rng.random_range(0.0..0.5);
            out.push(Detection::new(class, BBox::new(x, y, w, h)?.clamp_to(s, s), score)?);
        }
        Ok(out)
    }
}

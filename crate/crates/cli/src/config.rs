//! Run configuration. A TOML file is merged over the defaults of its
//! `preset`, then `--set section.key=value` overrides are applied, and the
//! result is parsed strictly (unknown keys are errors).

use std::path::{Path, PathBuf};

use regionnet::data::{AugmentOps, CropConfig, JitterMode, SynthConfig};
use regionnet::detect::{HeatmapConfig, OracleConfig};
use regionnet::geometry::PostProcess;
use regionnet::model::{EnsembleConfig, HeadConfig, TrainConfig};
use regionnet::nn::AdamConfig;
use regionnet::roialign::RoiGrid;
use regionnet::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Cub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Oracle,
    Heatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    /// Where gen-data writes and the other commands read the dataset.
    pub dir: PathBuf,
    /// CUB root containing images.txt etc. and an images/ directory.
    pub cub_root: PathBuf,
    /// Optional part merge map (JSON or TOML `[[regions]]` with name, parts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_map: Option<PathBuf>,
    pub num_classes: usize,
    pub num_parts: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub informative_parts: usize,
    pub p_absent: f64,
    pub noise_std: f64,
    pub stripe_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stage_channels: Vec<usize>,
    pub roi_size: usize,
    pub samples_per_bin: usize,
    pub residual_kernel: usize,
    pub hidden_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    pub jitter: bool,
    pub jitter_mode: JitterMode,
    pub region_scale: f64,
    pub hflip: bool,
    pub rotate90: bool,
    pub crop: bool,
    pub crop_min_fraction: f64,
    pub crop_max_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub kind: DetectorKind,
    pub jitter: bool,
    pub score_spread: f64,
    pub duplicates: usize,
    pub distractors: usize,
    pub stage_channels: Vec<usize>,
    pub threshold: f64,
    pub sigma: f64,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    /// `none`, `nms_standard` or `nms_special`.
    pub post: String,
    pub nms_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub augmentation: AugmentationSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let (size, channels, hidden, name) = match preset {
            Preset::Paper => (448, vec![32, 64, 128, 256], 256, "paper"),
            Preset::Desk => (128, vec![8, 16, 16], 32, "desk"),
        };
        let (source, classes, parts) = match preset {
            Preset::Paper => (Source::Cub, 200, 7),
            Preset::Desk => (Source::Synthetic, 4, 3),
        };
        Config {
            preset,
            seed: 42,
            output_dir: PathBuf::from(format!("runs/{name}")),
            dataset: DatasetSection {
                source,
                dir: PathBuf::from(format!("runs/{name}/data")),
                cub_root: PathBuf::from("CUB_200_2011"),
                merge_map: None,
                num_classes: classes,
                num_parts: parts,
                train_per_class: 50,
                test_per_class: 25,
                image_size: size,
                informative_parts: parts,
                p_absent: 0.0,
                noise_std: 0.03,
                stripe_period: 4.0,
            },
            model: ModelSection {
                stage_channels: channels.clone(),
                roi_size: 7,
                samples_per_bin: 2,
                residual_kernel: 3,
                hidden_units: hidden,
            },
            optimizer: OptimizerSection {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 1e-4,
                epochs: 10,
                batch_size: 8,
            },
            augmentation: AugmentationSection {
                jitter: true,
                jitter_mode: JitterMode::Decided,
                region_scale: regionnet::data::DEFAULT_REGION_SCALE,
                hflip: false,
                rotate90: false,
                crop: false,
                crop_min_fraction: 0.8,
                crop_max_fraction: 1.0,
            },
            detector: DetectorSection {
                kind: DetectorKind::Oracle,
                jitter: true,
                score_spread: 0.2,
                duplicates: 2,
                distractors: 1,
                stage_channels: channels,
                threshold: 0.3,
                sigma: 1.0,
                train_steps: 200,
                batch_size: 4,
                lr: 3e-3,
            },
            eval: EvalSection {
                iou_threshold: 0.5,
                post: "nms_special".into(),
                nms_threshold: 0.5,
            },
        }
    }

    /// Loads `path` (if any) over its preset and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let preset = match file.get("preset") {
            None => Preset::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut merged = to_table(&Config::preset(preset))?;
        merge(&mut merged, file);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        // Re-parsing the merged text makes errors point at the offending key.
        let text = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.source == Source::Synthetic {
            self.synth_config()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        self.ensemble_config()?.validate()?;
        self.train_config().validate()?;
        self.post_process()?;
        if self.augmentation.crop && self.crop_config().min_fraction > self.crop_config().max_fraction {
            return Err(Error::Config("crop_min_fraction exceeds crop_max_fraction".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = &self.dataset;
        SynthConfig {
            num_classes: d.num_classes,
            num_parts: d.num_parts,
            samples_per_class: d.train_per_class + d.test_per_class,
            image_size: d.image_size,
            informative_parts: d.informative_parts,
            p_absent: d.p_absent,
            noise_std: d.noise_std,
            stripe_period: d.stripe_period,
            region_scale: self.augmentation.region_scale,
        }
    }

    /// Model shape with class and region counts taken from the dataset.
    pub fn ensemble_config_for(&self, num_classes: usize, num_regions: usize, image_size: usize) -> EnsembleConfig {
        EnsembleConfig {
            num_regions,
            num_classes,
            input_size: image_size,
            stage_channels: self.model.stage_channels.clone(),
            roi: RoiGrid {
                out_h: self.model.roi_size,
                out_w: self.model.roi_size,
                samples_per_bin: self.model.samples_per_bin,
            },
            head: HeadConfig {
                residual_kernel: self.model.residual_kernel,
                hidden_units: self.model.hidden_units,
            },
        }
    }

    fn ensemble_config(&self) -> Result<EnsembleConfig> {
        let d = &self.dataset;
        let c = self.ensemble_config_for(d.num_classes, d.num_parts, d.image_size);
        c.validate()?;
        Ok(c)
    }

    fn crop_config(&self) -> CropConfig {
        CropConfig {
            min_fraction: self.augmentation.crop_min_fraction,
            max_fraction: self.augmentation.crop_max_fraction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        let a = &self.augmentation;
        TrainConfig {
            epochs: o.epochs,
            batch_size: o.batch_size,
            adam: AdamConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
            jitter: a.jitter.then_some(a.jitter_mode),
            augment: AugmentOps {
                hflip: a.hflip,
                rotate90: a.rotate90,
                crop: a.crop.then(|| self.crop_config()),
            },
        }
    }

    pub fn post_process(&self) -> Result<PostProcess> {
        PostProcess::parse(&self.eval.post, self.eval.nms_threshold).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn oracle_config(&self) -> OracleConfig {
        let d = &self.detector;
        OracleConfig {
            jitter: d.jitter.then_some(self.augmentation.jitter_mode),
            score_spread: d.score_spread,
            duplicates: d.duplicates,
            distractors: d.distractors,
            seed: self.seed,
        }
    }

    pub fn heatmap_config(&self) -> HeatmapConfig {
        HeatmapConfig {
            stage_channels: self.detector.stage_channels.clone(),
            threshold: self.detector.threshold,
            sigma: self.detector.sigma,
        }
    }

    pub fn heatmap_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.detector.lr,
            ..self.train_config().adam
        }
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string. The parent table must exist.
fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    let path: Vec<&str> = key.trim().split('.').collect();
    let (leaf, parents) = path.split_last().expect("split yields one item");
    let mut t = root;
    for p in parents {
        t = match t.get_mut(*p) {
            Some(Value::Table(next)) => next,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    t.insert((*leaf).to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = Config::preset(p);
            let text = c.to_toml().unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.toml");
            std::fs::write(&path, text).unwrap();
            assert_eq!(Config::load(Some(&path), &[]).unwrap(), c);
        }
    }

    #[test]
    fn overrides_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 7\n[optimizer]\nepochs = 3\n").unwrap();
        let c = Config::load(Some(&path), &["optimizer.lr=0.01".into(), "eval.post=none".into()]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.optimizer.epochs, 3);
        assert_eq!(c.optimizer.lr, 0.01);
        assert_eq!(c.eval.post, "none");
        assert_eq!(c.dataset.image_size, 128);

        assert!(Config::load(None, &["optimizer.learning_rate=1".into()]).is_err());
        assert!(Config::load(None, &["nosuch.key=1".into()]).is_err());
        assert!(Config::load(None, &["eval.post=fancy".into()]).is_err());
        assert!(Config::load(None, &["dataset.image_size=100".into()]).is_err());
    }
}

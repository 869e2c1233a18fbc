//! The ensemble classifier: shared trunk, per-region heads, fusion by
//! summed probabilities, joint cross-entropy training and evaluation.

mod config;
mod ensemble;
mod eval;
mod train;

pub use config::{EnsembleConfig, HeadConfig};
pub use ensemble::{ensemble_loss, fuse, EnsembleGrads, EnsembleModel};
pub use eval::{evaluate, regions_from_detections, ClassificationReport, RegionClassifier, RegionSource};
pub use train::{derived_rng, epoch_order, prepare_sample, train_epoch, EpochStats, StepLog, TrainConfig};

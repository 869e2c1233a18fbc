//! Datasets: synthetic generation, CUB annotation ingestion, region boxes
//! from part centers, augmentation and train/test splitting.

pub mod augment;
pub mod cub;
pub mod regions;
pub mod split;
pub mod store;
pub mod synth;
mod types;

pub use augment::{
    basic_augment, crop_resize, hflip, jitter_region, jitter_sample, rotate90, AugmentOps, CropConfig, JitterMode,
    JitterParams, TruncatedNormal, MAX_DRAWS,
};
pub use cub::{load_cub, save_cub, CubAnnotations, CubImage, CubRegions};
pub use regions::{parts_to_regions, PartCenter, PartMergeMap, RegionGroup, DEFAULT_REGION_SCALE};
pub use split::split;
pub use store::{load_dataset, save_dataset, Manifest, StoredDataset};
pub use synth::{generate_synthetic, SynthConfig};
pub use types::{AnnotatedSample, Dataset, Label, RegionInput};

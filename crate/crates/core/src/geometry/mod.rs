//! Box arithmetic, IoU, non-maximum suppression and AP evaluation.

mod ap;
mod bbox;
mod nms;
pub mod records;

pub use ap::{average_precision, mean_ap, ApResult, GroundTruthRegion, ImageDetection, DEFAULT_MATCH_IOU};
pub use bbox::{iou, BBox, MIN_BOX_SIZE};
pub use nms::{nms_special, nms_standard, priority, Detection, PostProcess};

//! Region detectors and AP evaluation.
//!
//! Two stand-ins for a learned two-stage detector: an oracle that perturbs
//! ground truth, and a small heatmap network with peak picking.

mod heatmap;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{average_precision, mean_ap, Detection, GroundTruthRegion, ImageDetection, PostProcess};

pub use heatmap::{
    find_peaks, heatmap_targets, mean_box_sizes, squared_error, train_heatmap_detector, HeatmapConfig, HeatmapDetector,
    Peak,
};
pub use oracle::{OracleConfig, OracleDetector};

/// Produces scored candidate regions for one sample. `index` is the
/// sample's position in its dataset and seeds any randomness.
pub trait Detector {
    fn detect(&self, sample: &AnnotatedSample, index: usize) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub post: String,
    pub iou_threshold: f64,
    /// Classes with at least one ground-truth region, in class order.
    pub per_class: Vec<ClassAp>,
    /// Classes with no ground truth; excluded from the mean.
    pub skipped: Vec<String>,
    pub map: f64,
}

impl DetectionReport {
    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(0).max(4);
        let mut out = format!("{:<width$}  AP\n", "region");
        for c in &self.per_class {
            out.push_str(&format!("{:<width$}  {:.4}\n", c.name, c.ap));
        }
        out.push_str(&format!("{:<width$}  {:.4}\n", "mAP", self.map));
        out
    }
}

/// Ground-truth regions of a dataset, tagged with sample positions.
pub fn ground_truth(dataset: &Dataset) -> Vec<GroundTruthRegion> {
    dataset
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.present_regions().map(move |r| GroundTruthRegion {
                image_id: i,
                region_class: r.region_class,
                bbox: r.bbox,
            })
        })
        .collect()
}

/// Runs `detector` over the dataset; output ordered by sample position.
pub fn detect_all(detector: &dyn Detector, dataset: &Dataset, post: &PostProcess) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        for d in post.apply(&detector.detect(s, i)?) {
            out.push(ImageDetection {
                image_id: i,
                detection: d,
            });
        }
    }
    Ok(out)
}

/// Per-class AP and mAP after post-processing each image's detections.
pub fn evaluate_detector(
    detector: &dyn Detector,
    dataset: &Dataset,
    iou_threshold: f64,
    post: &PostProcess,
) -> Result<DetectionReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Argument(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let dets = detect_all(detector, dataset, post)?;
    let gts = ground_truth(dataset);
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for (c, name) in dataset.region_names.iter().enumerate() {
        let r = average_precision(&dets, &gts, c, iou_threshold);
        if r.no_ground_truth {
            skipped.push(name.clone());
        } else {
            per_class.push(ClassAp {
                class: c,
                name: name.clone(),
                ap: r.ap,
            });
        }
    }
    let aps: Vec<f64> = per_class.iter().map(|c| c.ap).collect();
    let map = if aps.is_empty() { 0.0 } else { mean_ap(&aps)? };
    Ok(DetectionReport {
        post: post.name().to_owned(),
        iou_threshold,
        per_class,
        skipped,
        map,
    })
}

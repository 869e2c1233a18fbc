use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// A scored candidate region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub region_class: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(region_class: usize, bbox: BBox, score: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Argument(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            region_class,
            bbox,
            score,
        })
    }
}

/// Priority order: higher score first, then smaller center x, then smaller
/// center y. Remaining fields only make the order total.
pub fn priority(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.region_class.cmp(&b.region_class))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

fn sorted(dets: &[Detection]) -> Vec<Detection> {
    let mut v = dets.to_vec();
    v.sort_by(priority);
    v
}

/// Greedy per-class suppression: a detection is dropped when its IoU with
/// an already kept, higher-priority detection of the same class exceeds
/// `iou_threshold`. Output is in priority order.
pub fn nms_standard(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept_by_class: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    let mut out = Vec::new();
    for d in sorted(dets) {
        let kept = kept_by_class.entry(d.region_class).or_default();
        if kept.iter().all(|k| iou(k, &d.bbox) <= iou_threshold) {
            kept.push(d.bbox);
            out.push(d);
        }
    }
    out
}

/// Keeps only the highest-priority detection of every region class present.
/// Output is in priority order.
pub fn nms_special(dets: &[Detection]) -> Vec<Detection> {
    let mut best: BTreeMap<usize, Detection> = BTreeMap::new();
    for d in dets {
        best.entry(d.region_class)
            .and_modify(|b| {
                if priority(d, b) == Ordering::Less {
                    *b = *d;
                }
            })
            .or_insert(*d);
    }
    sorted(&best.into_values().collect::<Vec<_>>())
}

/// Post-processing applied to raw detections before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcess {
    None,
    NmsStandard { iou_threshold: f64 },
    NmsSpecial,
}

impl PostProcess {
    pub fn apply(&self, dets: &[Detection]) -> Vec<Detection> {
        match *self {
            PostProcess::None => sorted(dets),
            PostProcess::NmsStandard { iou_threshold } => nms_standard(dets, iou_threshold),
            PostProcess::NmsSpecial => nms_special(dets),
        }
    }

    /// Parses `none`, `nms_special` or `nms_standard` (the latter with the
    /// given threshold).
    pub fn parse(name: &str, nms_threshold: f64) -> Result<Self> {
        match name {
            "none" => Ok(PostProcess::None),
            "nms_standard" => {
                if !(nms_threshold > 0.0 && nms_threshold < 1.0) {
                    return Err(Error::Argument(format!("nms threshold {nms_threshold} outside (0, 1)")));
                }
                Ok(PostProcess::NmsStandard {
                    iou_threshold: nms_threshold,
                })
            }
            "nms_special" => Ok(PostProcess::NmsSpecial),
            other => Err(Error::Argument(format!("unknown post-processing mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PostProcess::None => "none",
            PostProcess::NmsStandard { .. } => "nms_standard",
            PostProcess::NmsSpecial => "nms_special",
        }
    }
}

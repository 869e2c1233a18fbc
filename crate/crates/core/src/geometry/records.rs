//! JSON-lines serialization of detections and ground truth:
//! one `{"image_id", "class", "x", "y", "w", "h", "score"?}` object per line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ap::{GroundTruthRegion, ImageDetection};
use super::bbox::BBox;
use super::nms::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub image_id: usize,
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RegionRecord {
    fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

impl From<&ImageDetection> for RegionRecord {
    fn from(d: &ImageDetection) -> Self {
        let b = d.detection.bbox;
        Self {
            image_id: d.image_id,
            class: d.detection.region_class,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            score: Some(d.detection.score),
        }
    }
}

impl From<&GroundTruthRegion> for RegionRecord {
    fn from(g: &GroundTruthRegion) -> Self {
        Self {
            image_id: g.image_id,
            class: g.region_class,
            x: g.bbox.x,
            y: g.bbox.y,
            w: g.bbox.w,
            h: g.bbox.h,
            score: None,
        }
    }
}

impl TryFrom<RegionRecord> for ImageDetection {
    type Error = Error;

    fn try_from(r: RegionRecord) -> Result<Self> {
        let score = r
            .score
            .ok_or_else(|| Error::Argument("detection record without score".into()))?;
        Ok(ImageDetection {
            image_id: r.image_id,
            detection: Detection::new(r.class, r.bbox()?, score)?,
        })
    }
}

impl TryFrom<RegionRecord> for GroundTruthRegion {
    type Error = Error;

    fn try_from(r: RegionRecord) -> Result<Self> {
        Ok(GroundTruthRegion {
            image_id: r.image_id,
            region_class: r.class,
            bbox: r.bbox()?,
        })
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[RegionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records, reporting malformed lines with their 1-based line number.
pub fn read_records<R: BufRead>(r: R, source: &Path) -> Result<Vec<RegionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RegionRecord = serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

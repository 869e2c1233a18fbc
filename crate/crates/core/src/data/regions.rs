use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::types::RegionInput;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Region box side as a fraction of the object box side.
pub const DEFAULT_REGION_SCALE: f64 = 0.25;

/// An annotated part center in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartCenter {
    pub part_id: u32,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionGroup {
    pub name: String,
    pub parts: Vec<u32>,
}

/// Assignment of raw part ids to region classes. Region class `i` is
/// `regions[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartMergeMap {
    pub regions: Vec<RegionGroup>,
}

impl PartMergeMap {
    /// Seven regions over the fifteen CUB-200-2011 part ids.
    pub fn cub_default() -> Self {
        let group = |name: &str, parts: &[u32]| RegionGroup {
            name: name.to_owned(),
            parts: parts.to_vec(),
        };
        // CUB ids: 1 back, 2 beak, 3 belly, 4 breast, 5 crown, 6 forehead,
        // 7 left eye, 8 left leg, 9 left wing, 10 nape, 11 right eye,
        // 12 right leg, 13 right wing, 14 tail, 15 throat
        Self {
            regions: vec![
                group("head", &[2, 5, 6, 7, 10, 11, 15]),
                group("back", &[1]),
                group("belly", &[3]),
                group("wing", &[9, 13]),
                group("leg", &[8, 12]),
                group("tail", &[14]),
                group("breast", &[4]),
            ],
        }
    }

    /// Region `i` is raw part `i`.
    pub fn identity(names: &[String]) -> Self {
        Self {
            regions: names
                .iter()
                .enumerate()
                .map(|(i, n)| RegionGroup {
                    name: n.clone(),
                    parts: vec![i as u32],
                })
                .collect(),
        }
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn region_names(&self) -> Vec<String> {
        self.regions.iter().map(|g| g.name.clone()).collect()
    }

    /// Checks that every part in `raw_ids` maps to exactly one region and
    /// that no region is empty.
    pub fn validate(&self, raw_ids: &BTreeSet<u32>) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, g) in self.regions.iter().enumerate() {
            if g.parts.is_empty() {
                return Err(Error::Config(format!("region `{}` has no parts", g.name)));
            }
            for &p in &g.parts {
                if let Some(prev) = seen.insert(p, i) {
                    return Err(Error::Config(format!(
                        "part {p} mapped to both region {prev} and region {i}"
                    )));
                }
            }
        }
        if let Some(missing) = raw_ids.iter().find(|id| !seen.contains_key(id)) {
            return Err(Error::Config(format!("part {missing} is not mapped to a region")));
        }
        if let Some(extra) = seen.keys().find(|id| !raw_ids.contains(id)) {
            return Err(Error::Config(format!("merge map names unknown part {extra}")));
        }
        Ok(())
    }

    fn region_of(&self, part: u32) -> Option<usize> {
        self.regions.iter().position(|g| g.parts.contains(&part))
    }
}

/// Builds one region per merge class, centered on its part with size
/// `region_scale × object size`, clamped to the image. When several visible
/// raw parts share a class the smallest part id wins.
pub fn parts_to_regions(
    parts: &[PartCenter],
    object_box: &BBox,
    merge: &PartMergeMap,
    region_scale: f64,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<RegionInput>> {
    if !(region_scale > 0.0 && region_scale.is_finite()) {
        return Err(Error::Argument(format!("region scale {region_scale} must be positive")));
    }
    let mut chosen: Vec<Option<&PartCenter>> = vec![None; merge.num_regions()];
    for p in parts.iter().filter(|p| p.visible) {
        if let Some(r) = merge.region_of(p.part_id) {
            match chosen[r] {
                Some(c) if c.part_id <= p.part_id => {}
                _ => chosen[r] = Some(p),
            }
        }
    }
    chosen
        .into_iter()
        .enumerate()
        .map(|(r, c)| match c {
            None => Ok(RegionInput::absent(r)),
            Some(p) => {
                let b = BBox::new(p.x, p.y, region_scale * object_box.w, region_scale * object_box.h)?;
                Ok(RegionInput {
                    region_class: r,
                    bbox: b.clamp_to(image_w, image_h),
                    present: true,
                })
            }
        })
        .collect()
}

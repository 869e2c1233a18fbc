use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Object category index in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub usize);

impl Label {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Argument(format!("label {class} out of range 0..{num_classes}")));
        }
        Ok(Self(class))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// One semantic region of an image. Absent regions keep a placeholder box
/// and are skipped by training and fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionInput {
    pub region_class: usize,
    pub bbox: BBox,
    pub present: bool,
}

impl RegionInput {
    pub fn absent(region_class: usize) -> Self {
        Self {
            region_class,
            bbox: BBox {
                x: 0.5,
                y: 0.5,
                w: 1.0,
                h: 1.0,
            },
            present: false,
        }
    }
}

/// Image plus annotations. `image` is `[3, S, S]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub id: usize,
    pub image: Tensor<f32>,
    pub label: Label,
    pub object_box: BBox,
    /// One entry per region class, indexed by class id.
    pub regions: Vec<RegionInput>,
}

impl AnnotatedSample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn present_regions(&self) -> impl Iterator<Item = &RegionInput> {
        self.regions.iter().filter(|r| r.present)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub region_names: Vec<String>,
    pub image_size: usize,
    pub samples: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn num_regions(&self) -> usize {
        self.region_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the dataset header.
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        let image = BBox {
            x: s / 2.0,
            y: s / 2.0,
            w: s,
            h: s,
        };
        for smp in &self.samples {
            let bad = |what: &str| Err(Error::Argument(format!("sample {}: {what}", smp.id)));
            if smp.image.shape() != [3, self.image_size, self.image_size] {
                return bad("image shape");
            }
            if smp.label.0 >= self.num_classes {
                return bad("label out of range");
            }
            if smp.regions.len() != self.num_regions() {
                return bad("region count");
            }
            if !image.contains(&smp.object_box) {
                return bad("object box outside the image");
            }
            for (i, r) in smp.regions.iter().enumerate() {
                if r.region_class != i {
                    return bad("regions must be ordered by class id");
                }
                if r.present && image.intersection_area(&r.bbox) <= 0.0 {
                    return bad("region does not intersect the image");
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            region_names: self.region_names.clone(),
            image_size: self.image_size,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

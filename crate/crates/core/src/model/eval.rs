use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ensemble::{fuse, EnsembleModel};
use crate::data::{Dataset, RegionInput};
use crate::detect::Detector;
use crate::error::{Error, Result};
use crate::geometry::{nms_special, Detection};
use crate::nn::ProbVector;
use crate::tensor::{Real, Tensor};

/// Anything that scores the present regions of an image, one ProbVector per
/// region, tagged with the head that produced it.
pub trait RegionClassifier {
    fn num_heads(&self) -> usize;
    fn classify(&self, image: &Tensor<f32>, regions: &[RegionInput]) -> Result<Vec<(usize, ProbVector)>>;
}

impl<T: Real> RegionClassifier for EnsembleModel<T> {
    fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn classify(&self, image: &Tensor<f32>, regions: &[RegionInput]) -> Result<Vec<(usize, ProbVector)>> {
        self.predict_regions(image, regions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    GroundTruth,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub region_names: Vec<String>,
    /// Accuracy of each head alone over the samples where its region was
    /// available; `None` when it never was.
    pub per_head: Vec<Option<f64>>,
    pub per_head_support: Vec<usize>,
    /// Accuracy of the fused prediction over all samples. A sample with no
    /// available region counts as wrong.
    pub fused: f64,
    pub num_samples: usize,
}

impl ClassificationReport {
    /// Plain-text table, one row per head plus the fused result.
    pub fn to_table(&self) -> String {
        let width = self
            .region_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(0)
            .max("final result".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  accuracy", "classifier");
        for (name, acc) in self.region_names.iter().zip(&self.per_head) {
            let acc = acc.map_or("n/a".to_owned(), |a| format!("{:.2}%", 100.0 * a));
            let _ = writeln!(out, "{name:<width$}  {acc:>8}");
        }
        let _ = writeln!(out, "{:<width$}  {:>7.2}%", "final result", 100.0 * self.fused);
        out
    }
}

/// Keeps the best detection per region class and turns it into region
/// inputs; classes without a detection are absent.
pub fn regions_from_detections(detections: &[Detection], num_regions: usize) -> Vec<RegionInput> {
    let mut regions: Vec<RegionInput> = (0..num_regions).map(RegionInput::absent).collect();
    for d in nms_special(detections) {
        if let Some(r) = regions.get_mut(d.region_class) {
            r.bbox = d.bbox;
            r.present = true;
        }
    }
    regions
}

/// Per-head and fused accuracy over `dataset`, in sample order.
pub fn evaluate(
    dataset: &Dataset,
    classifier: &dyn RegionClassifier,
    source: RegionSource,
    detector: Option<&dyn Detector>,
) -> Result<ClassificationReport> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let detector = match (source, detector) {
        (RegionSource::Detector, None) => {
            return Err(Error::Config(
                "region source is detector but no detector is configured".into(),
            ))
        }
        (RegionSource::Detector, d) => d,
        (RegionSource::GroundTruth, _) => None,
    };
    let t = classifier.num_heads();
    let mut hits = vec![0usize; t];
    let mut support = vec![0usize; t];
    let mut fused_hits = 0;
    for (i, s) in dataset.samples.iter().enumerate() {
        let regions = match detector {
            Some(d) => regions_from_detections(&d.detect(s, i)?, t),
            None => s.regions.clone(),
        };
        let outputs = classifier.classify(&s.image, &regions)?;
        for (h, p) in &outputs {
            support[*h] += 1;
            hits[*h] += usize::from(p.argmax() == s.label.0);
        }
        if !outputs.is_empty() && fuse(&outputs)?.0 == s.label {
            fused_hits += 1;
        }
    }
    let mut region_names = dataset.region_names.clone();
    region_names.resize_with(t, || "?".into());
    Ok(ClassificationReport {
        region_names,
        per_head: hits
            .iter()
            .zip(&support)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        per_head_support: support,
        fused: fused_hits as f64 / dataset.len() as f64,
        num_samples: dataset.len(),
    })
}

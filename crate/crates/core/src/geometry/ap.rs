use serde::{Deserialize, Serialize};

use super::bbox::{iou, BBox};
use super::nms::{priority, Detection};
use crate::error::{Error, Result};

/// Default IoU needed for a detection to count as a hit.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRegion {
    pub image_id: usize,
    pub region_class: usize,
    pub bbox: BBox,
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Set when the class has no ground truth; `ap` is then `0`.
    pub no_ground_truth: bool,
}

/// Area under the precision/recall curve for one class, using the monotone
/// max-precision envelope over every operating point.
pub fn average_precision(
    dets: &[ImageDetection],
    gts: &[GroundTruthRegion],
    region_class: usize,
    iou_threshold: f64,
) -> ApResult {
    let gts: Vec<&GroundTruthRegion> = gts.iter().filter(|g| g.region_class == region_class).collect();
    if gts.is_empty() {
        return ApResult {
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let mut dets: Vec<&ImageDetection> = dets
        .iter()
        .filter(|d| d.detection.region_class == region_class)
        .collect();
    dets.sort_by(|a, b| priority(&a.detection, &b.detection).then(a.image_id.cmp(&b.image_id)));

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(dets.len());
    let mut recalls = Vec::with_capacity(dets.len());
    for (k, d) in dets.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !matched[*j] && g.image_id == d.image_id)
            .map(|(j, g)| (j, iou(&g.bbox, &d.detection.bbox)))
            .filter(|&(_, o)| o >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / gts.len() as f64);
    }
    ApResult {
        ap: envelope_area(&recalls, &precisions),
        no_ground_truth: false,
    }
}

fn envelope_area(recalls: &[f64], precisions: &[f64]) -> f64 {
    let mut env = precisions.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recalls.iter().zip(&env) {
        area += (r - prev_r) * p;
        prev_r = *r;
    }
    area
}

/// Arithmetic mean of per-class APs.
pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Argument("mean AP of an empty list".into()));
    }
    if aps.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Argument("AP values must lie in [0, 1]".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64) -> BBox {
        BBox::new(x, y, 10.0, 10.0).unwrap()
    }

    fn idet(image_id: usize, class: usize, bbox: BBox, score: f64) -> ImageDetection {
        ImageDetection {
            image_id,
            detection: Detection::new(class, bbox, score).unwrap(),
        }
    }

    fn gt(image_id: usize, class: usize, bbox: BBox) -> GroundTruthRegion {
        GroundTruthRegion {
            image_id,
            region_class: class,
            bbox,
        }
    }

    #[test]
    fn ap_examples() {
        let g = [gt(0, 0, b(5.0, 5.0))];
        let perfect = [idet(0, 0, b(5.0, 5.0), 0.9)];
        assert_eq!(average_precision(&perfect, &g, 0, 0.5).ap, 1.0);

        let fp_then_tp = [idet(0, 0, b(50.0, 50.0), 0.9), idet(0, 0, b(5.0, 5.0), 0.8)];
        assert!((average_precision(&fp_then_tp, &g, 0, 0.5).ap - 0.5).abs() < 1e-12);

        assert_eq!(average_precision(&[], &g, 0, 0.5).ap, 0.0);

        let none = average_precision(&perfect, &g, 3, 0.5);
        assert!(none.no_ground_truth);
        assert_eq!(none.ap, 0.0);
    }

    #[test]
    fn ground_truth_matched_only_once() {
        let g = [gt(0, 0, b(5.0, 5.0))];
        let dup = [idet(0, 0, b(5.0, 5.0), 0.9), idet(0, 0, b(5.0, 5.0), 0.8)];
        assert_eq!(average_precision(&dup, &g, 0, 0.5).ap, 1.0);
        // the duplicate occurs after full recall and does not lower AP, but a
        // duplicate in another image is a plain false positive
        let other_image = [idet(1, 0, b(5.0, 5.0), 0.9), idet(0, 0, b(5.0, 5.0), 0.8)];
        assert!((average_precision(&other_image, &g, 0, 0.5).ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(mean_ap(&[0.3]).unwrap(), 0.3);
        assert!(matches!(mean_ap(&[]), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_score_rank(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<_> = (0..4)
                .map(|i| gt(i, 0, b(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0))))
                .collect();
            let dets: Vec<_> = (0..12)
                .map(|_| {
                    let i = rng.random_range(0..4);
                    let jitter = rng.random_range(-6.0..6.0);
                    idet(i, 0, b(gts[i].bbox.x + jitter, gts[i].bbox.y), rng.random_range(0.01..1.0))
                })
                .collect();
            let squashed: Vec<_> = dets
                .iter()
                .map(|d| ImageDetection {
                    detection: Detection { score: d.detection.score.powi(3), ..d.detection },
                    ..*d
                })
                .collect();
            let a = average_precision(&dets, &gts, 0, 0.5).ap;
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, average_precision(&squashed, &gts, 0, 0.5).ap);
        }
    }
}

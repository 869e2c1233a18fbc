//! Region coordinate jitter and whole-image geometric augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::AnnotatedSample;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Upper bound on rejection-sampling attempts per draw.
pub const MAX_DRAWS: usize = 100;

/// Gaussian restricted to `[lo, hi]` by rejection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub std_dev: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormal {
    /// Center shift in decided mode: mean 0, σ 0.1, `|draw| ≤ σ`.
    pub const SHIFT: Self = Self {
        mean: 0.0,
        std_dev: 0.1,
        lo: -0.1,
        hi: 0.1,
    };
    /// Center shift as printed: mean 1, σ 0.1, kept within one σ of the mean.
    pub const SHIFT_LITERAL: Self = Self {
        mean: 1.0,
        std_dev: 0.1,
        lo: 0.9,
        hi: 1.1,
    };
    /// Size scale: mean 1.1, σ 0.2, kept within one σ of the mean.
    pub const SCALE: Self = Self {
        mean: 1.1,
        std_dev: 0.2,
        lo: 0.9,
        hi: 1.3,
    };

    /// Returns the accepted value and the number of draws it took. If
    /// [`MAX_DRAWS`] is exhausted the mean is returned.
    pub fn sample_counted(&self, rng: &mut impl Rng) -> (f64, usize) {
        let normal = Normal::new(self.mean, self.std_dev).expect("positive std dev");
        for n in 1..=MAX_DRAWS {
            let v = normal.sample(rng);
            if (self.lo..=self.hi).contains(&v) {
                return (v, n);
            }
        }
        (self.mean, MAX_DRAWS + 1)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.sample_counted(rng).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterMode {
    /// Shift scaled by object width/height with mean-0 draws.
    Decided,
    /// Shift scaled by the object center coordinates with mean-1 draws.
    LiteralPaper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub mode: JitterMode,
}

impl JitterParams {
    /// Parameters that leave every box unchanged.
    pub fn neutral(mode: JitterMode) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            delta: 1.0,
            mode,
        }
    }

    pub fn sample(rng: &mut impl Rng, mode: JitterMode) -> Self {
        let shift = match mode {
            JitterMode::Decided => TruncatedNormal::SHIFT,
            JitterMode::LiteralPaper => TruncatedNormal::SHIFT_LITERAL,
        };
        Self {
            alpha: shift.sample(rng),
            beta: shift.sample(rng),
            gamma: TruncatedNormal::SCALE.sample(rng),
            delta: TruncatedNormal::SCALE.sample(rng),
            mode,
        }
    }
}

/// Shifts and rescales a region box, then clamps it to the image.
///
/// Decided mode: `x' = x + α·w_o`, `y' = y + β·h_o`. Literal mode:
/// `x' = x + α·x_o`, `y' = y + β·y_o`. Both: `w' = γ·w`, `h' = δ·h`.
pub fn jitter_region(bbox: &BBox, object_box: &BBox, params: &JitterParams, image_w: f64, image_h: f64) -> BBox {
    let (sx, sy) = match params.mode {
        JitterMode::Decided => (object_box.w, object_box.h),
        JitterMode::LiteralPaper => (object_box.x, object_box.y),
    };
    BBox {
        x: bbox.x + params.alpha * sx,
        y: bbox.y + params.beta * sy,
        w: params.gamma * bbox.w,
        h: params.delta * bbox.h,
    }
    .clamp_to(image_w, image_h)
}

/// Applies fresh jitter draws to every present region of `sample`.
pub fn jitter_sample(sample: &mut AnnotatedSample, mode: JitterMode, rng: &mut impl Rng) {
    let s = sample.image_size() as f64;
    let obj = sample.object_box;
    for r in sample.regions.iter_mut().filter(|r| r.present) {
        let p = JitterParams::sample(rng, mode);
        r.bbox = jitter_region(&r.bbox, &obj, &p, s, s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Crop side range as fractions of the image side.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOps {
    pub hflip: bool,
    pub rotate90: bool,
    pub crop: Option<CropConfig>,
}

fn map_boxes(sample: &mut AnnotatedSample, f: impl Fn(&BBox) -> BBox) {
    sample.object_box = f(&sample.object_box);
    for r in sample.regions.iter_mut().filter(|r| r.present) {
        r.bbox = f(&r.bbox);
    }
}

/// Mirrors the image left-right; `x → S − x`.
pub fn hflip(sample: &AnnotatedSample) -> AnnotatedSample {
    let s = sample.image_size();
    let src = sample.image.data();
    let image = Tensor::from_fn(sample.image.shape().to_vec(), |i| {
        let col = i % s;
        src[i - col + (s - 1 - col)]
    });
    let mut out = AnnotatedSample {
        image,
        ..sample.clone()
    };
    let sf = s as f64;
    map_boxes(&mut out, |b| BBox { x: sf - b.x, ..*b });
    out
}

/// Rotates by `k` quarter turns counter-clockwise.
pub fn rotate90(sample: &AnnotatedSample, k: usize) -> AnnotatedSample {
    let mut out = sample.clone();
    for _ in 0..k % 4 {
        out = rotate90_once(&out);
    }
    out
}

fn rotate90_once(sample: &AnnotatedSample) -> AnnotatedSample {
    let s = sample.image_size();
    let src = sample.image.data();
    // new[r][c] = old[c][S-1-r]
    let image = Tensor::from_fn(sample.image.shape().to_vec(), |i| {
        let (ch, r, c) = (i / (s * s), (i / s) % s, i % s);
        src[ch * s * s + c * s + (s - 1 - r)]
    });
    let mut out = AnnotatedSample {
        image,
        ..sample.clone()
    };
    let sf = s as f64;
    map_boxes(&mut out, |b| BBox {
        x: b.y,
        y: sf - b.x,
        w: b.h,
        h: b.w,
    });
    out
}

/// Crops the square `[left, left+side) × [top, top+side)` and resizes it back
/// to `S × S` with bilinear resampling.
pub fn crop_resize(sample: &AnnotatedSample, left: f64, top: f64, side: f64) -> Result<AnnotatedSample> {
    let s = sample.image_size();
    let sf = s as f64;
    if !(side > 0.0 && left >= 0.0 && top >= 0.0 && left + side <= sf && top + side <= sf) {
        return Err(Error::Argument(format!(
            "crop ({left}, {top}, {side}) does not fit the {s}px image"
        )));
    }
    let crop = BBox::from_top_left(left, top, side, side)?;
    if !crop.contains(&sample.object_box) {
        return Err(Error::Argument("crop does not contain the object box".into()));
    }
    let scale = side / sf;
    let src = &sample.image;
    let mut coords = Vec::with_capacity(s);
    for i in 0..s {
        let v = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        coords.push(v);
    }
    let lerp_axis = |v: f64| -> (usize, usize, f32) {
        let v = v.min(sf - 1.0);
        let i0 = v.floor() as usize;
        (i0, (i0 + 1).min(s - 1), (v - i0 as f64) as f32)
    };
    let image = Tensor::from_fn(src.shape().to_vec(), |i| {
        let (ch, r, c) = (i / (s * s), (i / s) % s, i % s);
        let (y0, y1, fy) = lerp_axis(top + coords[r]);
        let (x0, x1, fx) = lerp_axis(left + coords[c]);
        let a = src.at3(ch, y0, x0) * (1.0 - fx) + src.at3(ch, y0, x1) * fx;
        let b = src.at3(ch, y1, x0) * (1.0 - fx) + src.at3(ch, y1, x1) * fx;
        a * (1.0 - fy) + b * fy
    });
    let mut out = AnnotatedSample {
        image,
        ..sample.clone()
    };
    let k = sf / side;
    map_boxes(&mut out, |b| {
        BBox {
            x: (b.x - left) * k,
            y: (b.y - top) * k,
            w: b.w * k,
            h: b.h * k,
        }
        .clamp_to(sf, sf)
    });
    Ok(out)
}

/// Random flip, quarter-turn rotation and crop, each enabled by `ops`.
pub fn basic_augment(sample: &AnnotatedSample, ops: &AugmentOps, rng: &mut impl Rng) -> Result<AnnotatedSample> {
    let mut out = sample.clone();
    if let Some(crop) = ops.crop {
        let sf = sample.image_size() as f64;
        let obj = sample.object_box;
        let need = obj.w.max(obj.h);
        let lo = (crop.min_fraction * sf).max(need);
        let hi = (crop.max_fraction * sf).min(sf);
        if !(crop.min_fraction > 0.0 && crop.min_fraction <= crop.max_fraction) || hi < lo {
            return Err(Error::Argument(format!(
                "crop range {:?} cannot contain a {need:.1}px object",
                crop
            )));
        }
        let side = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let left_range = ((obj.right() - side).max(0.0), obj.left().min(sf - side));
        let top_range = ((obj.bottom() - side).max(0.0), obj.top().min(sf - side));
        let pick = |rng: &mut dyn rand::RngCore, (a, b): (f64, f64)| {
            if b > a {
                rng.random_range(a..=b)
            } else {
                a
            }
        };
        let left = pick(rng, left_range);
        let top = pick(rng, top_range);
        out = crop_resize(&out, left, top, side)?;
    }
    if ops.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if ops.rotate90 {
        out = rotate90(&out, rng.random_range(0..4));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neutral_jitter_is_identity() {
        let b = BBox::new(40.3, 50.7, 12.1, 9.9).unwrap();
        let obj = BBox::new(60.0, 60.0, 80.0, 80.0).unwrap();
        for mode in [JitterMode::Decided, JitterMode::LiteralPaper] {
            assert_eq!(jitter_region(&b, &obj, &JitterParams::neutral(mode), 128.0, 128.0), b);
        }
    }

    #[test]
    fn decided_shift_uses_object_width() {
        let b = BBox::new(100.0, 100.0, 20.0, 20.0).unwrap();
        let obj = BBox::new(110.0, 120.0, 80.0, 60.0).unwrap();
        let p = JitterParams {
            alpha: 0.05,
            ..JitterParams::neutral(JitterMode::Decided)
        };
        let out = jitter_region(&b, &obj, &p, 400.0, 400.0);
        assert!((out.x - 104.0).abs() < 1e-12);
        assert_eq!(out.y, 100.0);

        let lit = JitterParams {
            alpha: 0.05,
            ..JitterParams::neutral(JitterMode::LiteralPaper)
        };
        let out = jitter_region(&b, &obj, &lit, 400.0, 400.0);
        assert!((out.x - 105.5).abs() < 1e-12);
    }

    #[test]
    fn sampled_draws_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20_000 {
            let p = JitterParams::sample(&mut rng, JitterMode::Decided);
            assert!((-0.1..=0.1).contains(&p.alpha) && (-0.1..=0.1).contains(&p.beta));
            assert!((0.9..=1.3).contains(&p.gamma) && (0.9..=1.3).contains(&p.delta));
        }
    }

    fn toy_sample() -> AnnotatedSample {
        use super::super::types::{Label, RegionInput};
        let s = 8;
        AnnotatedSample {
            id: 0,
            image: Tensor::from_fn(vec![3, s, s], |i| (i % 17) as f32 / 16.0),
            label: Label(1),
            object_box: BBox::new(4.25, 3.5, 5.0, 4.0).unwrap(),
            regions: vec![
                RegionInput {
                    region_class: 0,
                    bbox: BBox::new(3.0, 2.5, 1.5, 1.0).unwrap(),
                    present: true,
                },
                RegionInput::absent(1),
            ],
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = toy_sample();
        let f = hflip(&s);
        assert_eq!(f.object_box.x, 8.0 - 4.25);
        assert_eq!(f.regions[0].bbox.x, 5.0);
        assert_eq!(hflip(&f), s);
    }

    #[test]
    fn four_quarter_turns_restore_the_sample() {
        let s = toy_sample();
        let r = rotate90(&s, 1);
        assert_eq!(r.object_box.w, 4.0);
        assert_eq!((r.regions[0].bbox.x, r.regions[0].bbox.y), (2.5, 5.0));
        // a bright pixel at top-right moves to top-left
        let mut t = toy_sample();
        t.image = Tensor::zeros(vec![3, 8, 8]);
        t.image.data_mut()[7] = 1.0;
        assert_eq!(rotate90(&t, 1).image.data()[0], 1.0);
        assert_eq!(rotate90(&s, 4), s);
    }

    #[test]
    fn crop_keeps_boxes_inside() {
        let s = toy_sample();
        let c = crop_resize(&s, 1.0, 1.0, 7.0).unwrap();
        assert!((c.object_box.x - (3.25 * 8.0 / 7.0)).abs() < 1e-12);
        assert!(crop_resize(&s, 3.0, 0.0, 5.0).is_err());
        let bad = AugmentOps {
            crop: Some(CropConfig {
                min_fraction: 0.2,
                max_fraction: 0.4,
            }),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(basic_augment(&s, &bad, &mut rng), Err(Error::Argument(_))));
    }
}

//! Procedural fine-grained dataset.
//!
//! Every image holds one elliptical object with `T` disk-shaped parts placed
//! on a shared layout. Classes differ only in the stripe orientation of the
//! informative parts: part `t` shows vertical stripes when
//! `popcount(class & mask_t)` is odd, where `mask_t` cycles through the
//! non-zero `b`-bit masks and `b = ceil(log2 C)`. With `C = 4, T = 3` each
//! part alone narrows the class to two candidates and any two parts
//! together identify it. Colors, stripe phase, object pose and pixel noise
//! are nuisance variables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::regions::{parts_to_regions, PartCenter, PartMergeMap, DEFAULT_REGION_SCALE};
use super::store::{byte_to_unit, unit_to_byte};
use super::types::{AnnotatedSample, Dataset, Label};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_parts: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Parts `0..informative_parts` carry class information; the rest get a
    /// random orientation.
    pub informative_parts: usize,
    /// Probability that a part is occluded (not drawn, marked absent).
    pub p_absent: f64,
    pub noise_std: f64,
    pub stripe_period: f64,
    pub region_scale: f64,
}

impl SynthConfig {
    pub fn new(num_classes: usize, num_parts: usize, samples_per_class: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            num_parts,
            samples_per_class,
            image_size,
            informative_parts: num_parts,
            p_absent: 0.0,
            noise_std: 0.03,
            stripe_period: 4.0,
            region_scale: DEFAULT_REGION_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_parts < 1 {
            return bad("need at least 1 part".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image size {} is below 16", self.image_size));
        }
        if self.informative_parts > self.num_parts {
            return bad("informative_parts exceeds num_parts".into());
        }
        if !(0.0..1.0).contains(&self.p_absent) {
            return bad(format!("p_absent {} must lie in [0, 1)", self.p_absent));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative".into());
        }
        if !(self.stripe_period >= 2.0 && self.stripe_period.is_finite()) {
            return bad("stripe_period must be at least 2 px".into());
        }
        if !(self.region_scale > 0.0 && self.region_scale <= 0.5) {
            return bad(format!("region_scale {} must lie in (0, 0.5]", self.region_scale));
        }
        Ok(())
    }

    pub fn region_names(&self) -> Vec<String> {
        (0..self.num_parts).map(|t| format!("part{t}")).collect()
    }
}

fn code_bits(num_classes: usize) -> u32 {
    usize::BITS - (num_classes - 1).leading_zeros()
}

/// Stripe orientation bit for `part` of `class` (true = vertical stripes).
pub fn part_code(class: usize, part: usize, num_classes: usize) -> bool {
    let masks = (1usize << code_bits(num_classes)) - 1;
    let mask = part % masks + 1;
    (class & mask).count_ones() % 2 == 1
}

fn quantize(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

struct Part {
    center: (f64, f64),
    radius: f64,
    vertical: bool,
    phase: f64,
    colors: [[f64; 3]; 2],
    visible: bool,
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// Generates sample `index` from its own RNG stream.
pub fn generate_sample(config: &SynthConfig, seed: u64, index: usize) -> Result<AnnotatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let class = index % config.num_classes;
    let s = config.image_size as f64;

    // Object size in multiples of 1/16 px so region sizes stay on the 1/64 grid.
    let w_o = (rng.random_range(0.55..0.75) * s * 16.0).round() / 16.0;
    let h_o = (rng.random_range(0.55..0.75) * s * 16.0).round() / 16.0;
    let x_o = quantize(rng.random_range(w_o / 2.0 + 1.0..s - w_o / 2.0 - 1.0));
    let y_o = quantize(rng.random_range(h_o / 2.0 + 1.0..s - h_o / 2.0 - 1.0));
    let object_box = BBox::new(x_o, y_o, w_o, h_o)?;

    let bg = random_color(&mut rng, 0.1, 0.5);
    let body = random_color(&mut rng, 0.35, 0.75);
    let spin = rng.random_range(-0.3..0.3);
    let t = config.num_parts;
    let mut parts = Vec::with_capacity(t);
    for p in 0..t {
        let theta = std::f64::consts::TAU * p as f64 / t as f64 + spin;
        let center = (
            quantize(x_o + 0.3 * w_o * theta.cos()),
            quantize(y_o + 0.3 * h_o * theta.sin()),
        );
        let vertical = if p < config.informative_parts {
            part_code(class, p, config.num_classes)
        } else {
            rng.random_bool(0.5)
        };
        let dark = random_color(&mut rng, 0.0, 0.25);
        let bright = random_color(&mut rng, 0.75, 1.0);
        parts.push(Part {
            center,
            radius: 0.13 * w_o.min(h_o),
            vertical,
            phase: rng.random_range(0.0..config.stripe_period),
            colors: [dark, bright],
            visible: !rng.random_bool(config.p_absent),
        });
    }

    let n = config.image_size;
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut image = vec![0f32; 3 * n * n];
    let (rx, ry) = (w_o / 2.0, h_o / 2.0);
    let freq = std::f64::consts::TAU / config.stripe_period;
    for r in 0..n {
        let py = r as f64 + 0.5;
        for c in 0..n {
            let px = c as f64 + 0.5;
            let mut rgb = bg;
            // Anti-aliased ellipse edge via a first-order distance estimate.
            let (dx, dy) = ((px - x_o) / rx, (py - y_o) / ry);
            let e = (dx * dx + dy * dy).sqrt();
            let alpha = ((1.0 - e) * rx.min(ry) + 0.5).clamp(0.0, 1.0);
            blend(&mut rgb, &body, alpha);
            for part in parts.iter().filter(|p| p.visible) {
                let d = ((px - part.center.0).powi(2) + (py - part.center.1).powi(2)).sqrt();
                let a = (part.radius - d + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    let u = if part.vertical { px } else { py };
                    let k = 0.5 + 0.5 * (freq * (u + part.phase)).sin();
                    let mut col = part.colors[0];
                    blend(&mut col, &part.colors[1], k);
                    blend(&mut rgb, &col, a);
                }
            }
            for ch in 0..3 {
                let v = rgb[ch]
                    + if config.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                image[ch * n * n + r * n + c] = byte_to_unit(unit_to_byte(v));
            }
        }
    }

    let centers: Vec<PartCenter> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| PartCenter {
            part_id: i as u32,
            x: p.center.0,
            y: p.center.1,
            visible: p.visible,
        })
        .collect();
    let merge = PartMergeMap::identity(&config.region_names());
    let regions = parts_to_regions(&centers, &object_box, &merge, config.region_scale, s, s)?;
    Ok(AnnotatedSample {
        id: index,
        image: Tensor::new(vec![3, n, n], image)?,
        label: Label(class),
        object_box,
        regions,
    })
}

fn blend(dst: &mut [f64; 3], src: &[f64; 3], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d * (1.0 - a) + s * a;
    }
}

/// Generates `C × samples_per_class` samples with labels cycling through
/// the classes. Samples are rendered in parallel; each one uses only its own
/// RNG stream so results do not depend on the thread count.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let total = config.num_classes * config.samples_per_class;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(total);
    let chunk = total.div_ceil(threads);
    let mut samples: Vec<AnnotatedSample> = Vec::with_capacity(total);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t * chunk..((t + 1) * chunk).min(total))
                        .map(|i| generate_sample(config, seed, i))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        for h in handles {
            samples.extend(h.join().expect("generator thread panicked")?);
        }
        Ok(())
    })?;
    Ok(Dataset {
        num_classes: config.num_classes,
        region_names: config.region_names(),
        image_size: config.image_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_class_codes_need_two_parts() {
        let codes: Vec<Vec<bool>> = (0..4).map(|c| (0..3).map(|t| part_code(c, t, 4)).collect()).collect();
        for t in 0..3 {
            assert_eq!(
                codes.iter().filter(|c| c[t]).count(),
                2,
                "each part splits classes in half"
            );
        }
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(codes[a], codes[b]);
                let agree = (0..3).filter(|&t| codes[a][t] == codes[b][t]).count();
                assert!(agree <= 1, "any two parts separate every pair");
            }
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let cfg = SynthConfig::new(4, 3, 5, 32);
        let a = generate_synthetic(&cfg, 9).unwrap();
        assert_eq!(a.len(), 20);
        for c in 0..4 {
            assert_eq!(a.samples.iter().filter(|s| s.label.0 == c).count(), 5);
        }
        assert_eq!(a, generate_synthetic(&cfg, 9).unwrap());
        assert_ne!(a, generate_synthetic(&cfg, 10).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn part_centers_inside_object() {
        let cfg = SynthConfig {
            p_absent: 0.3,
            ..SynthConfig::new(3, 5, 20, 48)
        };
        let d = generate_synthetic(&cfg, 1).unwrap();
        for s in &d.samples {
            for r in s.present_regions() {
                assert!(s.object_box.contains_point(r.bbox.x, r.bbox.y));
                assert!(s.object_box.contains(&r.bbox));
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(d.samples.iter().any(|s| s.present_regions().count() < 5));
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_synthetic(&SynthConfig::new(1, 3, 5, 32), 0).is_err());
        assert!(generate_synthetic(&SynthConfig::new(2, 0, 5, 32), 0).is_err());
    }
}

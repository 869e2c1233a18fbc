//! Bilinear RoIAlign.
//!
//! Feature value `(r, c)` sits at continuous coordinate `x = c, y = r`.
//! Coordinates outside `[0, W-1] × [0, H-1]` are clamped to the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub samples_per_bin: usize,
}

impl Default for RoiGrid {
    fn default() -> Self {
        Self {
            out_h: 7,
            out_w: 7,
            samples_per_bin: 2,
        }
    }
}

impl RoiGrid {
    pub fn validate(&self) -> Result<()> {
        if self.out_h == 0 || self.out_w == 0 || self.samples_per_bin == 0 {
            return Err(Error::Config(format!("invalid RoI grid {self:?}")));
        }
        Ok(())
    }
}

/// Maps an image-space box onto a feature map with the given stride.
pub fn image_to_feature_box(bbox: &BBox, stride: usize) -> Result<BBox> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    Ok(bbox.scaled_down(stride as f64))
}

/// The four (flat spatial index, weight) taps of a bilinear sample.
fn taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

fn map_dims<T: Real>(map: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *map.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Argument(format!(
            "feature map must be [C, H, W], got {:?}",
            map.shape()
        ))),
    }
}

/// Per-channel bilinear value at `(x, y)`.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    let (c, h, w) = map_dims(map)?;
    let t = taps(h, w, x, y);
    Ok((0..c)
        .map(|ch| {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            t.iter().map(|&(i, wt)| plane[i] * T::from_f64(wt)).sum()
        })
        .collect())
}

/// Sample taps for every output bin, including the `1/k²` averaging factor.
struct SamplePlan {
    bins: Vec<Vec<(usize, f64)>>,
}

impl SamplePlan {
    fn new(h: usize, w: usize, bbox: &BBox, grid: &RoiGrid) -> Self {
        let k = grid.samples_per_bin;
        let bin_w = bbox.w / grid.out_w as f64;
        let bin_h = bbox.h / grid.out_h as f64;
        let norm = 1.0 / (k * k) as f64;
        let mut bins = Vec::with_capacity(grid.out_h * grid.out_w);
        for by in 0..grid.out_h {
            for bx in 0..grid.out_w {
                let mut v = Vec::with_capacity(4 * k * k);
                for sy in 0..k {
                    let y = bbox.top() + bin_h * (by as f64 + (sy as f64 + 0.5) / k as f64);
                    for sx in 0..k {
                        let x = bbox.left() + bin_w * (bx as f64 + (sx as f64 + 0.5) / k as f64);
                        v.extend(taps(h, w, x, y).iter().map(|&(i, wt)| (i, wt * norm)));
                    }
                }
                bins.push(v);
            }
        }
        Self { bins }
    }
}

/// Pools `bbox` (feature coordinates) into a `[C, out_h, out_w]` grid; each
/// bin averages `k × k` bilinear samples at uniform sub-bin centers.
pub fn roi_align<T: Real>(map: &Tensor<T>, bbox: &BBox, grid: &RoiGrid) -> Result<Tensor<T>> {
    grid.validate()?;
    let (c, h, w) = map_dims(map)?;
    let plan = SamplePlan::new(h, w, bbox, grid);
    let nb = plan.bins.len();
    let mut out = Vec::with_capacity(c * nb);
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        for taps in &plan.bins {
            out.push(taps.iter().map(|&(i, wt)| plane[i] * T::from_f64(wt)).sum());
        }
    }
    Tensor::new(vec![c, grid.out_h, grid.out_w], out)
}

/// Adds the gradient of [`roi_align`] with respect to the feature map into `grad_map`.
pub fn roi_align_backward<T: Real>(
    grad_map: &mut Tensor<T>,
    bbox: &BBox,
    grid: &RoiGrid,
    grad_out: &Tensor<T>,
) -> Result<()> {
    grid.validate()?;
    let (c, h, w) = map_dims(grad_map)?;
    if grad_out.shape() != [c, grid.out_h, grid.out_w] {
        return Err(Error::Argument(format!(
            "RoI gradient shape {:?} does not match grid",
            grad_out.shape()
        )));
    }
    let plan = SamplePlan::new(h, w, bbox, grid);
    let nb = plan.bins.len();
    let gm = grad_map.data_mut();
    for ch in 0..c {
        let plane = &mut gm[ch * h * w..(ch + 1) * h * w];
        for (b, taps) in plan.bins.iter().enumerate() {
            let g = grad_out.data()[ch * nb + b];
            for &(i, wt) in taps {
                plane[i] += g * T::from_f64(wt);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bilinear interpolation written as a sum of tent kernels over all cells.
    fn tent_sample(map: &Tensor<f64>, ch: usize, x: f64, y: f64) -> f64 {
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let xc = x.max(0.0).min((w - 1) as f64);
        let yc = y.max(0.0).min((h - 1) as f64);
        let mut s = 0.0;
        for r in 0..h {
            for c in 0..w {
                let kx = (1.0 - (xc - c as f64).abs()).max(0.0);
                let ky = (1.0 - (yc - r as f64).abs()).max(0.0);
                s += kx * ky * map.at3(ch, r, c);
            }
        }
        s
    }

    fn dense_oracle(map: &Tensor<f64>, b: &BBox, oh: usize, ow: usize, n: usize) -> Vec<f64> {
        let c = map.shape()[0];
        let mut out = Vec::new();
        for ch in 0..c {
            for by in 0..oh {
                for bx in 0..ow {
                    let y0 = b.top() + b.h * by as f64 / oh as f64;
                    let x0 = b.left() + b.w * bx as f64 / ow as f64;
                    let mut acc = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let y = y0 + b.h / oh as f64 * (i as f64 + 0.5) / n as f64;
                            let x = x0 + b.w / ow as f64 * (j as f64 + 0.5) / n as f64;
                            acc += tent_sample(map, ch, x, y);
                        }
                    }
                    out.push(acc / (n * n) as f64);
                }
            }
        }
        out
    }

    fn random_map(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![c, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sample_at_grid_point_and_on_ramp() {
        let map = Tensor::from_fn(vec![2, 4, 5], |i| i as f64 * 0.5);
        let v = bilinear_sample(&map, 3.0, 2.0).unwrap();
        assert_eq!(v, vec![map.at3(0, 2, 3), map.at3(1, 2, 3)]);

        let ramp = Tensor::from_fn(vec![1, 4, 6], |i| (i % 6) as f64);
        assert!((bilinear_sample(&ramp, 2.5, 1.3).unwrap()[0] - 2.5).abs() < 1e-12);
        // clamped outside the map
        assert_eq!(bilinear_sample(&ramp, -3.0, 9.0).unwrap()[0], 0.0);
        assert_eq!(bilinear_sample(&ramp, 40.0, 1.0).unwrap()[0], 5.0);
    }

    #[test]
    fn bilinear_matches_tent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let map = random_map(&mut rng, 2, 5, 7);
            let x = rng.random_range(-2.0..9.0);
            let y = rng.random_range(-2.0..7.0);
            let v = bilinear_sample(&map, x, y).unwrap();
            for (ch, got) in v.iter().enumerate() {
                assert!((got - tent_sample(&map, ch, x, y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn feature_box_mapping() {
        let b = BBox::new(100.0, 60.0, 40.0, 24.0).unwrap();
        assert_eq!(image_to_feature_box(&b, 1).unwrap(), b);
        let f = image_to_feature_box(&b, 8).unwrap();
        assert_eq!((f.x, f.y, f.w, f.h), (12.5, 7.5, 5.0, 3.0));
        let full = BBox::new(448.0, 448.0, 448.0, 448.0).unwrap();
        let f = image_to_feature_box(&full, 16).unwrap();
        assert_eq!((f.x, f.y, f.w, f.h), (28.0, 28.0, 28.0, 28.0));
        assert!(image_to_feature_box(&b, 0).is_err());
    }

    #[test]
    fn constant_and_ramp_maps() {
        let grid = RoiGrid::default();
        let map = Tensor::full(vec![3, 10, 10], 0.7f64);
        let b = BBox::new(4.3, 5.1, 3.3, 2.2).unwrap();
        let out = roi_align(&map, &b, &grid).unwrap();
        assert_eq!(out.shape(), &[3, 7, 7]);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let ramp = Tensor::from_fn(vec![1, 10, 10], |i| (i % 10) as f64);
        let out = roi_align(&ramp, &b, &grid).unwrap();
        for by in 0..7 {
            for bx in 0..7 {
                let center = b.left() + b.w * (bx as f64 + 0.5) / 7.0;
                assert!((out.at3(0, by, bx) - center).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_box_still_yields_full_grid() {
        let map = Tensor::from_fn(vec![2, 4, 4], |i| i as f64);
        let b = BBox::new(1.5, 1.5, 0.01, 0.02).unwrap();
        let out = roi_align(&map, &b, &RoiGrid::default()).unwrap();
        assert_eq!(out.shape(), &[2, 7, 7]);
    }

    #[test]
    fn matches_dense_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = RoiGrid {
            out_h: 3,
            out_w: 4,
            samples_per_bin: 64,
        };
        for _ in 0..5 {
            let map = random_map(&mut rng, 2, 8, 9);
            let b = BBox::new(
                rng.random_range(1.0..7.0),
                rng.random_range(1.0..6.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.5..6.0),
            )
            .unwrap();
            let out = roi_align(&map, &b, &grid).unwrap();
            let oracle = dense_oracle(&map, &b, 3, 4, 64);
            for (a, o) in out.data().iter().zip(&oracle) {
                assert!((a - o).abs() <= 2e-3);
            }
        }
    }

    #[test]
    fn linear_in_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = RoiGrid::default();
        let map = random_map(&mut rng, 2, 6, 6);
        let b = BBox::new(2.2, 3.1, 4.0, 2.5).unwrap();
        let (a, off) = (-1.7f64, 0.4f64);
        let affine = map.map(|v| a * v + off);
        let base = roi_align(&map, &b, &grid).unwrap();
        let got = roi_align(&affine, &b, &grid).unwrap();
        for (g, v) in got.data().iter().zip(base.data()) {
            assert!((g - (a * v + off)).abs() <= 1e-9);
        }
    }

    #[test]
    fn translation_consistency_with_constant_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = RoiGrid::default();
        let map = random_map(&mut rng, 1, 6, 6);
        let (dy, dx) = (3usize, 2usize);
        let padded = Tensor::from_fn(vec![1, 12, 12], |i| {
            let (r, c) = (i / 12, i % 12);
            if (dy..dy + 6).contains(&r) && (dx..dx + 6).contains(&c) {
                map.at3(0, r - dy, c - dx)
            } else {
                0.25
            }
        });
        let b = BBox::new(2.5, 2.7, 3.0, 2.0).unwrap();
        let shifted = BBox::new(b.x + dx as f64, b.y + dy as f64, b.w, b.h).unwrap();
        let a = roi_align(&map, &b, &grid).unwrap();
        let s = roi_align(&padded, &shifted, &grid).unwrap();
        for (x, y) in a.data().iter().zip(s.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let grid = RoiGrid {
            out_h: 3,
            out_w: 3,
            samples_per_bin: 2,
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng, 2, 5, 6);
            let b = BBox::new(
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..5.0),
                rng.random_range(0.5..5.0),
                rng.random_range(0.5..5.0),
            )
            .unwrap();
            let proj = random_map(&mut rng, 2, 3, 3);
            let loss = |m: &Tensor<f64>| -> f64 {
                let o = roi_align(m, &b, &grid).unwrap();
                o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            };
            let mut g = Tensor::zeros(vec![2, 5, 6]);
            roi_align_backward(&mut g, &b, &grid, &proj).unwrap();
            let eps = 1e-5;
            for k in 0..map.len() {
                let mut up = map.clone();
                up.data_mut()[k] += eps;
                let mut down = map.clone();
                down.data_mut()[k] -= eps;
                let num = (loss(&up) - loss(&down)) / (2.0 * eps);
                let ana = g.data()[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel <= 1e-4, "seed {seed} idx {k}: {ana} vs {num}");
            }
        }
    }
}

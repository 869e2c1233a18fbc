//! Conv net producing one sigmoid heatmap per region class at the trunk
//! stride; detections are the peaks of each channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Detector;
use crate::data::{AnnotatedSample, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::model::epoch_order;
use crate::nn::{AdamConfig, LayerSpec, Network, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    pub stage_channels: Vec<usize>,
    pub threshold: f64,
    /// Target bump width in heatmap cells.
    pub sigma: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 16],
            threshold: 0.3,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapDetector {
    pub config: HeatmapConfig,
    net: Network,
    pub params: ParamStore<f32>,
    /// Fixed `(w, h)` per region class, in image pixels.
    pub box_sizes: Vec<(f64, f64)>,
    input_size: usize,
}

/// Mean ground-truth `(w, h)` per region class; classes never present get
/// a quarter of the image side.
pub fn mean_box_sizes(dataset: &Dataset) -> Vec<(f64, f64)> {
    let t = dataset.num_regions();
    let mut sum = vec![(0.0, 0.0, 0usize); t];
    for s in &dataset.samples {
        for r in s.present_regions() {
            let e = &mut sum[r.region_class];
            e.0 += r.bbox.w;
            e.1 += r.bbox.h;
            e.2 += 1;
        }
    }
    let fallback = dataset.image_size as f64 / 4.0;
    sum.into_iter()
        .map(|(w, h, n)| {
            if n == 0 {
                (fallback, fallback)
            } else {
                (w / n as f64, h / n as f64)
            }
        })
        .collect()
}

impl HeatmapDetector {
    pub fn new(
        config: HeatmapConfig,
        input_size: usize,
        box_sizes: Vec<(f64, f64)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = Self::network(&config, input_size, box_sizes.len())?;
        let params = net.init_params(rng);
        Ok(Self {
            config,
            net,
            params,
            box_sizes,
            input_size,
        })
    }

    pub fn network(config: &HeatmapConfig, input_size: usize, num_regions: usize) -> Result<Network> {
        if num_regions == 0 {
            return Err(Error::Config("heatmap detector needs at least one class".into()));
        }
        if !(0.0..=1.0).contains(&config.threshold) || config.sigma.is_nan() || config.sigma <= 0.0 {
            return Err(Error::Config(
                "heatmap threshold must lie in [0, 1] and sigma be positive".into(),
            ));
        }
        let stride = 1usize << config.stage_channels.len();
        if !input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input size {input_size} not divisible by stride {stride}"
            )));
        }
        let mut layers = Vec::new();
        let mut c_in = 3;
        for &c in &config.stage_channels {
            layers.push(LayerSpec::conv3x3(c_in, c));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2x2);
            c_in = c;
        }
        layers.push(LayerSpec::conv3x3(c_in, c_in));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Conv2d {
            in_channels: c_in,
            out_channels: num_regions,
            kernel: 1,
            stride: 1,
            padding: 0,
        });
        layers.push(LayerSpec::Sigmoid);
        Network::new(vec![3, input_size, input_size], layers)
    }

    pub fn stride(&self) -> usize {
        1 << self.config.stage_channels.len()
    }

    pub fn num_regions(&self) -> usize {
        self.box_sizes.len()
    }

    pub fn heatmap(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.net.forward(&self.params, image)?.0)
    }

    /// Detections for every qualifying peak of `heatmap`.
    pub fn detections_from_heatmap(&self, heatmap: &Tensor<f32>) -> Result<Vec<Detection>> {
        let s = self.input_size as f64;
        let stride = self.stride() as f64;
        find_peaks(heatmap, self.config.threshold)
            .into_iter()
            .map(|p| {
                let (w, h) = self.box_sizes[p.channel];
                let b = BBox::new(p.col as f64 * stride, p.row as f64 * stride, w, h)?.clamp_to(s, s);
                Detection::new(p.channel, b, p.value.clamp(0.0, 1.0))
            })
            .collect()
    }
}

impl Detector for HeatmapDetector {
    fn detect(&self, sample: &AnnotatedSample, _index: usize) -> Result<Vec<Detection>> {
        self.detections_from_heatmap(&self.heatmap(&sample.image)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Local maxima above `threshold` in each channel of a `[T, H, W]` map.
///
/// A cell is a peak when it is strictly greater than all its 8 neighbours.
/// A connected plateau of equal values whose outer neighbours are all
/// smaller yields one peak at its smallest `(row, col)`.
pub fn find_peaks<T: Real>(map: &Tensor<T>, threshold: f64) -> Vec<Peak> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        let at = |r: usize, col: usize| plane[r * w + col].as_f64();
        let neighbours = |r: usize, col: usize| {
            let mut n = Vec::with_capacity(8);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, col as i64 + dc);
                    if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        n.push((rr as usize, cc as usize));
                    }
                }
            }
            n
        };
        let mut visited = vec![false; h * w];
        for r in 0..h {
            for col in 0..w {
                let v = at(r, col);
                if visited[r * w + col] || v <= threshold {
                    continue;
                }
                if neighbours(r, col).iter().any(|&(a, b)| at(a, b) > v) {
                    continue;
                }
                // Flood the equal-valued component; scan order makes (r, col)
                // its smallest member.
                let mut stack = vec![(r, col)];
                visited[r * w + col] = true;
                let mut is_peak = true;
                while let Some((a, b)) = stack.pop() {
                    for (x, y) in neighbours(a, b) {
                        let u = at(x, y);
                        if u > v {
                            is_peak = false;
                        } else if u == v && !visited[x * w + y] {
                            visited[x * w + y] = true;
                            stack.push((x, y));
                        }
                    }
                }
                if is_peak {
                    out.push(Peak {
                        channel: ch,
                        row: r,
                        col,
                        value: v,
                    });
                }
            }
        }
    }
    out
}

/// Target `[T, H/stride, W/stride]`: a Gaussian bump at each present region
/// center, combined by maximum.
pub fn heatmap_targets(sample: &AnnotatedSample, num_regions: usize, stride: usize, sigma: f64) -> Tensor<f32> {
    let n = sample.image_size() / stride;
    let mut t = Tensor::<f32>::zeros(vec![num_regions, n, n]);
    let d = t.data_mut();
    for reg in sample.present_regions().filter(|r| r.region_class < num_regions) {
        let (cx, cy) = (reg.bbox.x / stride as f64, reg.bbox.y / stride as f64);
        for r in 0..n {
            for c in 0..n {
                let e = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)) / (2.0 * sigma * sigma);
                let v = (-e).exp() as f32;
                let slot = &mut d[reg.region_class * n * n + r * n + c];
                *slot = slot.max(v);
            }
        }
    }
    t
}

/// Squared-error loss `Σ (p - t)²` and its gradient with respect to `p`.
pub fn squared_error<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    let two = T::from_f64(2.0);
    let mut loss = 0.0;
    let g = Tensor::from_fn(pred.shape().to_vec(), |i| {
        let d = pred.data()[i] - target.data()[i];
        loss += (d * d).as_f64();
        two * d
    });
    (loss, g)
}

impl HeatmapDetector {
    /// Summed squared error of one sample and the parameter gradients.
    pub fn loss_and_grads(&self, sample: &AnnotatedSample) -> Result<(f64, crate::nn::Grads<f32>)> {
        let target = heatmap_targets(sample, self.num_regions(), self.stride(), self.config.sigma);
        let (pred, mut tape) = self.net.forward(&self.params, &sample.image)?;
        let (loss, g) = squared_error(&pred, &target);
        let back = self.net.backward_with(&self.params, &mut tape, &g, false)?;
        Ok((loss, back.grads))
    }

    /// Mean per-sample squared error over a dataset.
    pub fn mean_loss(&self, dataset: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for s in &dataset.samples {
            let target = heatmap_targets(s, self.num_regions(), self.stride(), self.config.sigma);
            total += squared_error(&self.heatmap(&s.image)?, &target).0;
        }
        Ok(total / dataset.len().max(1) as f64)
    }
}

/// `steps` Adam updates on mini-batches cycling through `dataset` in a
/// seeded order. Returns the batch loss (mean per sample) before each step.
pub fn train_heatmap_detector(
    detector: &mut HeatmapDetector,
    dataset: &Dataset,
    steps: u64,
    batch_size: usize,
    adam: &AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train a detector on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    adam.validate()?;
    let mut losses = Vec::with_capacity(steps as usize);
    let mut queue: Vec<usize> = Vec::new();
    let mut epoch = 0;
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if queue.is_empty() {
                queue = epoch_order(dataset.len(), seed, epoch);
                queue.reverse();
                epoch += 1;
            }
            batch.push(queue.pop().expect("refilled"));
        }
        let mut grads = crate::nn::Grads::zeros_like(&detector.params);
        let mut loss = 0.0;
        for &i in &batch {
            let (l, g) = detector.loss_and_grads(&dataset.samples[i])?;
            loss += l;
            grads.accumulate(&g)?;
        }
        detector.params.adam_step(&grads, adam)?;
        losses.push(loss / batch.len() as f64);
    }
    Ok(losses)
}

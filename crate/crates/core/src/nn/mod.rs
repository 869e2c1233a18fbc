//! Small sequential network core with reverse-mode gradients.
//!
//! Networks operate on a single sample at a time. Spatial layers take
//! `[channels, height, width]`; dense layers flatten whatever they receive.

pub mod checkpoint;
pub mod loss;
pub mod ops;
pub mod params;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
pub use checkpoint::Checkpoint;
pub use loss::{cross_entropy, softmax, ProbVector, PROB_FLOOR};
use ops::ConvGeom;
pub use params::{AdamConfig, Grads, Param, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        units: usize,
    },
    Relu,
    Sigmoid,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    /// conv → relu → conv plus identity shortcut, `same` padding.
    ResidualBlock {
        channels: usize,
        kernel: usize,
    },
    Softmax,
}

impl LayerSpec {
    /// 3×3 stride-1 convolution with `same` padding.
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        use LayerSpec::*;
        let ok = match *self {
            Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && kernel % 2 == 1 && stride >= 1,
            Dense { inputs, units } => inputs > 0 && units > 0,
            ResidualBlock { channels, kernel } => channels > 0 && kernel % 2 == 1,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent layer hyperparameters {self:?}")))
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        use LayerSpec::*;
        let mismatch = |what: &str| {
            Err(Error::Config(format!(
                "layer {index} ({self:?}) cannot take input {input:?}: {what}"
            )))
        };
        match *self {
            Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input[..] else {
                    return mismatch("expected [C, H, W]");
                };
                if c != in_channels {
                    return mismatch("channel count");
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return mismatch("kernel larger than padded input");
                }
                let g = ConvGeom {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_h: h,
                    in_w: w,
                };
                Ok(vec![out_channels, g.out_h(), g.out_w()])
            }
            Dense { inputs, units } => {
                if input.iter().product::<usize>() != inputs {
                    return mismatch("flattened size");
                }
                Ok(vec![units])
            }
            Relu | Sigmoid | Softmax => Ok(input.to_vec()),
            MaxPool2x2 => {
                let [c, h, w] = input[..] else {
                    return mismatch("expected [C, H, W]");
                };
                if h < 2 || w < 2 {
                    return mismatch("spatial size below 2");
                }
                Ok(vec![c, h / 2, w / 2])
            }
            GlobalAvgPool => {
                let [c, _, _] = input[..] else {
                    return mismatch("expected [C, H, W]");
                };
                Ok(vec![c])
            }
            ResidualBlock { channels, kernel } => {
                let [c, h, w] = input[..] else {
                    return mismatch("expected [C, H, W]");
                };
                if c != channels || h + 2 * (kernel / 2) < kernel || w + 2 * (kernel / 2) < kernel {
                    return mismatch("channel count");
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Activations saved by one layer for the backward pass.
#[derive(Debug)]
enum Saved<T> {
    Conv {
        input: Tensor<T>,
    },
    Dense {
        input: Tensor<T>,
    },
    Relu {
        input: Tensor<T>,
    },
    Sigmoid {
        output: Tensor<T>,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
    Residual {
        input: Tensor<T>,
        hidden_pre: Tensor<T>,
        hidden: Tensor<T>,
    },
    Softmax {
        output: Tensor<T>,
    },
}

/// Record of one forward pass; consumed by exactly one backward pass.
#[derive(Debug)]
pub struct GradTape<T> {
    saved: Vec<Saved<T>>,
    consumed: bool,
}

impl<T> GradTape<T> {
    pub fn len(&self) -> usize {
        self.saved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

#[derive(Debug)]
pub struct Backward<T> {
    pub grads: Grads<T>,
    pub input_grad: Option<Tensor<T>>,
}

/// A validated sequential network with a fixed input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

fn check_finite<T: Real>(t: &Tensor<T>, layer: usize, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            context: what.to_owned(),
        })
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        let net = Self { input_shape, layers };
        for l in &net.layers {
            l.validate()?;
        }
        net.output_shape()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape derived from the layer list alone.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .enumerate()
            .try_fold(self.input_shape.clone(), |s, (i, l)| l.output_shape(i, &s))
    }

    /// Fan-in scaled Gaussian weights, zero biases.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut gauss = |shape: Vec<usize>, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
        };
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let w = gauss(
                        vec![out_channels, in_channels, kernel, kernel],
                        in_channels * kernel * kernel,
                    );
                    store.insert(format!("{i}.weight"), w);
                    store.insert(format!("{i}.bias"), Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::Dense { inputs, units } => {
                    store.insert(format!("{i}.weight"), gauss(vec![units, inputs], inputs));
                    store.insert(format!("{i}.bias"), Tensor::zeros(vec![units]));
                }
                LayerSpec::ResidualBlock { channels, kernel } => {
                    for j in 1..=2 {
                        let w = gauss(vec![channels, channels, kernel, kernel], channels * kernel * kernel);
                        store.insert(format!("{i}.weight{j}"), w);
                        store.insert(format!("{i}.bias{j}"), Tensor::zeros(vec![channels]));
                    }
                }
                _ => {}
            }
        }
        store
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<(Tensor<T>, GradTape<T>)> {
        if input.shape() != self.input_shape {
            return Err(Error::Config(format!(
                "input shape {:?} does not match network input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        check_finite(input, 0, "input")?;
        let mut x = input.clone();
        let mut saved = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, s) = self.forward_layer(i, layer, params, x)?;
            check_finite(&y, i, "activation")?;
            saved.push(s);
            x = y;
        }
        Ok((x, GradTape { saved, consumed: false }))
    }

    fn forward_layer<T: Real>(
        &self,
        i: usize,
        layer: &LayerSpec,
        params: &ParamStore<T>,
        x: Tensor<T>,
    ) -> Result<(Tensor<T>, Saved<T>)> {
        let out_shape = layer.output_shape(i, x.shape())?;
        Ok(match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeom {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_h: x.shape()[1],
                    in_w: x.shape()[2],
                };
                let w = params.require(&format!("{i}.weight"))?;
                let b = params.require(&format!("{i}.bias"))?;
                let y = ops::conv2d_forward(&g, x.data(), w.data(), b.data());
                (Tensor::new(out_shape, y)?, Saved::Conv { input: x })
            }
            LayerSpec::Dense { .. } => {
                let w = params.require(&format!("{i}.weight"))?;
                let b = params.require(&format!("{i}.bias"))?;
                let y = ops::dense_forward(x.data(), w.data(), b.data());
                (Tensor::new(out_shape, y)?, Saved::Dense { input: x })
            }
            LayerSpec::Relu => (
                x.map(|v| if v > T::zero() { v } else { T::zero() }),
                Saved::Relu { input: x },
            ),
            LayerSpec::Sigmoid => {
                let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                (y.clone(), Saved::Sigmoid { output: y })
            }
            LayerSpec::MaxPool2x2 => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (y, argmax) = ops::maxpool2x2_forward(x.data(), c, h, w);
                (
                    Tensor::new(out_shape, y)?,
                    Saved::MaxPool {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::GlobalAvgPool => {
                let hw = x.shape()[1] * x.shape()[2];
                let inv = T::from_f64(1.0 / hw as f64);
                let y = x
                    .data()
                    .chunks_exact(hw)
                    .map(|p| p.iter().copied().sum::<T>() * inv)
                    .collect();
                (
                    Tensor::new(out_shape, y)?,
                    Saved::GlobalAvgPool {
                        input_shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::ResidualBlock { channels, kernel } => {
                let g = residual_geom(channels, kernel, x.shape());
                let w1 = params.require(&format!("{i}.weight1"))?;
                let b1 = params.require(&format!("{i}.bias1"))?;
                let w2 = params.require(&format!("{i}.weight2"))?;
                let b2 = params.require(&format!("{i}.bias2"))?;
                let pre = ops::conv2d_forward(&g, x.data(), w1.data(), b1.data());
                let hidden_pre = Tensor::new(out_shape.clone(), pre)?;
                let hidden = hidden_pre.map(|v| if v > T::zero() { v } else { T::zero() });
                let mut y = ops::conv2d_forward(&g, hidden.data(), w2.data(), b2.data());
                for (o, &s) in y.iter_mut().zip(x.data()) {
                    *o += s;
                }
                (
                    Tensor::new(out_shape, y)?,
                    Saved::Residual {
                        input: x,
                        hidden_pre,
                        hidden,
                    },
                )
            }
            LayerSpec::Softmax => {
                let mut y = x.into_data();
                ops::softmax_in_place(&mut y);
                let y = Tensor::new(out_shape, y)?;
                (y.clone(), Saved::Softmax { output: y })
            }
        })
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: &mut GradTape<T>,
        output_grad: &Tensor<T>,
    ) -> Result<Backward<T>> {
        self.backward_with(params, tape, output_grad, true)
    }

    /// Reverse pass over `tape`. Skipping the input gradient saves the most
    /// expensive part of the first layer when the input is data.
    pub fn backward_with<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: &mut GradTape<T>,
        output_grad: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<Backward<T>> {
        if tape.consumed {
            return Err(Error::State("gradient tape was already consumed".into()));
        }
        if tape.saved.len() != self.layers.len() {
            return Err(Error::State("tape was recorded by a different network".into()));
        }
        let expected = self.output_shape()?;
        if output_grad.shape() != expected {
            return Err(Error::Argument(format!(
                "output gradient shape {:?}, expected {expected:?}",
                output_grad.shape()
            )));
        }
        tape.consumed = true;
        let saved = std::mem::take(&mut tape.saved);
        let mut grads = Grads::zeros_like(params);
        let mut g = output_grad.clone();
        for (i, (layer, s)) in self.layers.iter().zip(saved).enumerate().rev() {
            let need_in = want_input_grad || i > 0;
            g = self.backward_layer(i, layer, params, s, g, need_in, &mut grads)?;
        }
        Ok(Backward {
            grads,
            input_grad: want_input_grad.then_some(g),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer<T: Real>(
        &self,
        i: usize,
        layer: &LayerSpec,
        params: &ParamStore<T>,
        saved: Saved<T>,
        g: Tensor<T>,
        need_in: bool,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let placeholder = || Tensor::zeros(vec![1]);
        Ok(match (layer, saved) {
            (
                &LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Saved::Conv { input },
            ) => {
                let geom = ConvGeom {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_h: input.shape()[1],
                    in_w: input.shape()[2],
                };
                let w = params.require(&format!("{i}.weight"))?;
                let (gin, gw, gb) = ops::conv2d_backward(&geom, input.data(), w.data(), g.data(), need_in);
                grads.insert(format!("{i}.weight"), Tensor::new(w.shape().to_vec(), gw)?);
                grads.insert(format!("{i}.bias"), Tensor::new(vec![out_channels], gb)?);
                match gin {
                    Some(gin) => Tensor::new(input.shape().to_vec(), gin)?,
                    None => placeholder(),
                }
            }
            (&LayerSpec::Dense { units, .. }, Saved::Dense { input }) => {
                let w = params.require(&format!("{i}.weight"))?;
                let (gin, gw, gb) = ops::dense_backward(input.data(), w.data(), g.data(), need_in);
                grads.insert(format!("{i}.weight"), Tensor::new(w.shape().to_vec(), gw)?);
                grads.insert(format!("{i}.bias"), Tensor::new(vec![units], gb)?);
                match gin {
                    Some(gin) => Tensor::new(input.shape().to_vec(), gin)?,
                    None => placeholder(),
                }
            }
            (LayerSpec::Relu, Saved::Relu { input }) => {
                let data = g
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)?
            }
            (LayerSpec::Sigmoid, Saved::Sigmoid { output }) => {
                let data = g
                    .data()
                    .iter()
                    .zip(output.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                Tensor::new(output.shape().to_vec(), data)?
            }
            (LayerSpec::MaxPool2x2, Saved::MaxPool { argmax, input_shape }) => {
                let mut gin = Tensor::zeros(input_shape);
                let d = gin.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx] += gv;
                }
                gin
            }
            (LayerSpec::GlobalAvgPool, Saved::GlobalAvgPool { input_shape }) => {
                let hw = input_shape[1] * input_shape[2];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut data = Vec::with_capacity(input_shape.iter().product());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, hw));
                }
                Tensor::new(input_shape, data)?
            }
            (
                &LayerSpec::ResidualBlock { channels, kernel },
                Saved::Residual {
                    input,
                    hidden_pre,
                    hidden,
                },
            ) => {
                let geom = residual_geom(channels, kernel, input.shape());
                let w1 = params.require(&format!("{i}.weight1"))?;
                let w2 = params.require(&format!("{i}.weight2"))?;
                let (gh, gw2, gb2) = ops::conv2d_backward(&geom, hidden.data(), w2.data(), g.data(), true);
                let mut gh = gh.expect("requested");
                for (v, &p) in gh.iter_mut().zip(hidden_pre.data()) {
                    if p <= T::zero() {
                        *v = T::zero();
                    }
                }
                let (gx, gw1, gb1) = ops::conv2d_backward(&geom, input.data(), w1.data(), &gh, need_in);
                grads.insert(format!("{i}.weight1"), Tensor::new(w1.shape().to_vec(), gw1)?);
                grads.insert(format!("{i}.bias1"), Tensor::new(vec![channels], gb1)?);
                grads.insert(format!("{i}.weight2"), Tensor::new(w2.shape().to_vec(), gw2)?);
                grads.insert(format!("{i}.bias2"), Tensor::new(vec![channels], gb2)?);
                match gx {
                    Some(mut gx) => {
                        for (a, &b) in gx.iter_mut().zip(g.data()) {
                            *a += b;
                        }
                        Tensor::new(input.shape().to_vec(), gx)?
                    }
                    None => placeholder(),
                }
            }
            (LayerSpec::Softmax, Saved::Softmax { output }) => {
                let dot: T = g.data().iter().zip(output.data()).map(|(&a, &b)| a * b).sum();
                let data = g
                    .data()
                    .iter()
                    .zip(output.data())
                    .map(|(&gv, &y)| y * (gv - dot))
                    .collect();
                Tensor::new(output.shape().to_vec(), data)?
            }
            _ => return Err(Error::State(format!("tape entry {i} does not match layer"))),
        })
    }
}

fn residual_geom(channels: usize, kernel: usize, shape: &[usize]) -> ConvGeom {
    ConvGeom {
        in_channels: channels,
        out_channels: channels,
        kernel,
        stride: 1,
        padding: kernel / 2,
        in_h: shape[1],
        in_w: shape[2],
    }
}

#[cfg(test)]
mod tests;

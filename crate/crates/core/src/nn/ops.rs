//! Slice-level kernels for the layer implementations.
//!
//! Feature maps are `[channels, height, width]` in row-major order.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding` lies in `[0, in_w)`.
    #[inline]
    fn valid_range(&self, k_off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // ix = o*s + k_off - p  must satisfy 0 <= ix < in_len
        let s = self.stride;
        let p = self.padding;
        let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
        let hi_num = in_len + p - k_off; // ix < in_len  <=>  o*s < in_len + p - k_off
        let hi = if in_len + p <= k_off {
            0
        } else {
            hi_num.div_ceil(s).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut out = vec![T::zero(); g.out_channels * oh * ow];
    for oc in 0..g.out_channels {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.in_channels {
            let in_plane = &input[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, oh);
                for kx in 0..k {
                    let wv = weight[((oc * g.in_channels + ic) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.padding;
                            let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (o, &x) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is skipped when not requested.
#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut gin = want_input_grad.then(|| vec![T::zero(); g.in_channels * g.in_h * g.in_w]);
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.out_channels];
    for oc in 0..g.out_channels {
        let gplane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] = gplane.iter().copied().sum();
        for ic in 0..g.in_channels {
            let in_off = ic * g.in_h * g.in_w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, oh);
                for kx in 0..k {
                    let widx = ((oc * g.in_channels + ic) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row_off = in_off + iy * g.in_w;
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.padding;
                            let n = ox_hi - ox_lo;
                            let src = &input[row_off + ix0..row_off + ix0 + n];
                            let gsrc = &grow[ox_lo..ox_hi];
                            acc += gsrc.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                            if let Some(gin) = gin.as_mut() {
                                let dst = &mut gin[row_off + ix0..row_off + ix0 + n];
                                for (d, &go) in dst.iter_mut().zip(gsrc) {
                                    *d += wv * go;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.padding;
                                acc += grow[ox] * input[row_off + ix];
                                if let Some(gin) = gin.as_mut() {
                                    gin[row_off + ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gin, gw, gb)
}

/// `y = W x + b` with `W` stored `[units, inputs]`.
pub fn dense_forward<T: Real>(input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n = input.len();
    weight
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, &b)| b + row.iter().zip(input).map(|(&w, &x)| w * x).sum::<T>())
        .collect()
}

pub fn dense_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n = input.len();
    let mut gw = vec![T::zero(); weight.len()];
    for (row, &go) in gw.chunks_exact_mut(n).zip(grad_out) {
        for (g, &x) in row.iter_mut().zip(input) {
            *g = go * x;
        }
    }
    let gin = want_input_grad.then(|| {
        let mut gin = vec![T::zero(); n];
        for (row, &go) in weight.chunks_exact(n).zip(grad_out) {
            for (g, &w) in gin.iter_mut().zip(row) {
                *g += go * w;
            }
        }
        gin
    });
    (gin, gw, grad_out.to_vec())
}

/// 2×2 max pooling with stride 2. Returns the pooled map and the flat input index of each max.
pub fn maxpool2x2_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

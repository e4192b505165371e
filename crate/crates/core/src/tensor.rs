//! Dense CHW tensors and the 2-D convolution used by the detector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A channels x height x width array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor3 { channels, height, width, data })
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Zeroes `grad` wherever the post-activation value was not positive.
    pub fn relu_backward(activated: &Tensor3, grad: &mut Tensor3) {
        for (g, a) in grad.data.iter_mut().zip(&activated.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Mean over the spatial dimensions, one value per channel.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let n = (self.height * self.width).max(1) as f64;
        self.data
            .chunks(self.height * self.width)
            .map(|plane| plane.iter().sum::<f64>() / n)
            .collect()
    }
}

/// Square-kernel convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::normal_init(in_channels, out_channels, kernel, stride, (2.0 / fan_in).sqrt(), 0.0, rng)
    }

    pub fn normal_init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        std: f64,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias: vec![bias; out_channels],
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let p = 2 * self.pad();
        (
            (height + p - self.kernel) / self.stride + 1,
            (width + p - self.kernel) / self.stride + 1,
        )
    }

    /// Output positions `o` whose tap `o * stride + k - pad` lands in `[0, n)`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let p = self.pad() as isize;
        let s = self.stride as isize;
        let k = k as isize;
        // o * s + k - p >= 0  ->  o >= ceil((p - k) / s)
        let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
        // o * s + k - p <= n - 1  ->  o <= floor((n - 1 + p - k) / s)
        let top = n as isize - 1 + p - k;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        debug_assert_eq!(input.channels, self.in_channels);
        let (oh, ow) = self.output_size(input.height, input.width);
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let plane = oh * ow;
        for o in 0..self.out_channels {
            let out_plane = &mut out.data[o * plane..(o + 1) * plane];
            out_plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let in_plane = &input.data[i * input.height * input.width..(i + 1) * input.height * input.width];
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, input.height, oh);
                    for kx in 0..k {
                        let w = self.weight[((o * self.in_channels + i) * k + ky) * k + kx];
                        let (x0, x1) = self.valid_range(kx, input.width, ow);
                        for y in y0..y1 {
                            let iy = y * s + ky - p;
                            let row_in = &in_plane[iy * input.width..(iy + 1) * input.width];
                            let row_out = &mut out_plane[y * ow..(y + 1) * ow];
                            for x in x0..x1 {
                                row_out[x] += w * row_in[x * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient
    /// when `want_input_grad` is set.
    pub fn backward(
        &self,
        input: &Tensor3,
        grad_out: &Tensor3,
        grad: &mut ConvGrad,
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let plane = oh * ow;
        let in_plane_len = input.height * input.width;
        let mut grad_in = want_input_grad.then(|| Tensor3::zeros(input.channels, input.height, input.width));
        for o in 0..self.out_channels {
            let go = &grad_out.data[o * plane..(o + 1) * plane];
            grad.bias[o] += go.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let in_plane = &input.data[i * in_plane_len..(i + 1) * in_plane_len];
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, input.height, oh);
                    for kx in 0..k {
                        let widx = ((o * self.in_channels + i) * k + ky) * k + kx;
                        let w = self.weight[widx];
                        let (x0, x1) = self.valid_range(kx, input.width, ow);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y * s + ky - p;
                            let row_in = &in_plane[iy * input.width..(iy + 1) * input.width];
                            let row_go = &go[y * ow..(y + 1) * ow];
                            for x in x0..x1 {
                                acc += row_go[x] * row_in[x * s + kx - p];
                            }
                        }
                        grad.weight[widx] += acc;
                        if let Some(gi) = grad_in.as_mut() {
                            let gi_plane = &mut gi.data[i * in_plane_len..(i + 1) * in_plane_len];
                            for y in y0..y1 {
                                let iy = y * s + ky - p;
                                let row_go = &go[y * ow..(y + 1) * ow];
                                let row_gi = &mut gi_plane[iy * input.width..(iy + 1) * input.width];
                                for x in x0..x1 {
                                    row_gi[x * s + kx - p] += w * row_go[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

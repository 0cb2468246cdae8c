//! Minimal CPU layers with hand-written reverse mode: 3x3 convolutions
//! (zero padding 1), nearest-neighbour upsampling and ReLU, over `f64`
//! channel-major tensors.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

/// Channel-major `(channels, height, width)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Self { channels, height, width, data })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// 3x3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `(out, in, 3, 3)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    /// Weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt((in_channels * 9) as f64);
        let weight = (0..out_channels * in_channels * 9).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..out_channels).map(|_| rng.random_range(-bound..bound)).collect();
        Self { in_channels, out_channels, stride, weight, bias }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        ((height - 1) / self.stride + 1, (width - 1) / self.stride + 1)
    }

    #[inline]
    fn tap_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // output positions o with 0 <= o*stride + k - 1 < in_len
        let s = self.stride;
        let lo = if k == 0 { 1 } else { 0 };
        let hi = (in_len + 1 - k).div_ceil(s); // exclusive
        (lo, hi.min(out_len))
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        debug_assert_eq!(input.channels, self.in_channels);
        let (oh, ow) = self.output_size(input.height, input.width);
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        let s = self.stride;
        let (ih, iw) = (input.height, input.width);
        for oc in 0..self.out_channels {
            let out_plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            out_plane.iter_mut().for_each(|v| *v = self.bias[oc]);
            for ic in 0..self.in_channels {
                let in_plane = input.plane(ic);
                let wbase = (oc * self.in_channels + ic) * 9;
                for ky in 0..3 {
                    let (y0, y1) = self.tap_range(ky, oh, ih);
                    for kx in 0..3 {
                        let w = self.weight[wbase + ky * 3 + kx];
                        let (x0, x1) = self.tap_range(kx, ow, iw);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - 1;
                            let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                            let irow = &in_plane[iy * iw..(iy + 1) * iw];
                            for ox in x0..x1 {
                                orow[ox] += w * irow[ox * s + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad_weight`/`grad_bias` and,
    /// when requested, returns the gradient with respect to the input.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let (ih, iw) = (input.height, input.width);
        let s = self.stride;
        let mut grad_in = want_input_grad.then(|| Tensor::zeros(self.in_channels, ih, iw));
        for oc in 0..self.out_channels {
            let g_plane = grad_out.plane(oc);
            grad_bias[oc] += g_plane.iter().sum::<f64>();
            for ic in 0..self.in_channels {
                let in_plane = input.plane(ic);
                let wbase = (oc * self.in_channels + ic) * 9;
                for ky in 0..3 {
                    let (y0, y1) = self.tap_range(ky, oh, ih);
                    for kx in 0..3 {
                        let (x0, x1) = self.tap_range(kx, ow, iw);
                        let w = self.weight[wbase + ky * 3 + kx];
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - 1;
                            let grow = &g_plane[oy * ow..(oy + 1) * ow];
                            let irow = &in_plane[iy * iw..(iy + 1) * iw];
                            for ox in x0..x1 {
                                acc += grow[ox] * irow[ox * s + kx - 1];
                            }
                        }
                        grad_weight[wbase + ky * 3 + kx] += acc;
                        if let Some(gi) = grad_in.as_mut() {
                            let gi_plane = &mut gi.data[ic * ih * iw..(ic + 1) * ih * iw];
                            for oy in y0..y1 {
                                let iy = oy * s + ky - 1;
                                let grow = &g_plane[oy * ow..(oy + 1) * ow];
                                let girow = &mut gi_plane[iy * iw..(iy + 1) * iw];
                                for ox in x0..x1 {
                                    girow[ox * s + kx - 1] += w * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Masks `grad` by the ReLU derivative at `pre` (zero at `pre == 0`).
pub fn relu_backward(pre: &Tensor, grad: &mut Tensor) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour upsampling by 2 in both directions.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Tensor::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                out.data[(c * h + y / 2) * w + x / 2] += grad.at(c, y, x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of a padded, strided 3x3 convolution.
    fn conv_reference(conv: &Conv3x3, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let mut out = Tensor::zeros(conv.out_channels, oh, ow);
        for oc in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[oc];
                    for ic in 0..conv.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * conv.stride + ky) as isize - 1;
                                let ix = (ox * conv.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += conv.weight[((oc * conv.in_channels + ic) * 3 + ky) * 3 + kx]
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, h, w) in &[(1, 5, 7), (2, 8, 8), (2, 7, 5)] {
            let conv = Conv3x3::init(3, 4, stride, &mut rng);
            let x = random_tensor(3, h, w, &mut rng);
            let a = conv.forward(&x);
            let b = conv_reference(&conv, &x);
            assert_eq!((a.height, a.width), (b.height, b.width));
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), g> is linear in x and in w, so gradients must satisfy
        // <dL/dx, x> + <dL/dw, w> + <dL/db, b> = <conv(x), g>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &stride in &[1, 2] {
            let conv = Conv3x3::init(2, 3, stride, &mut rng);
            let x = random_tensor(2, 6, 6, &mut rng);
            let y = conv.forward(&x);
            let g = random_tensor(3, y.height, y.width, &mut rng);
            let mut gw = vec![0.0; conv.weight.len()];
            let mut gb = vec![0.0; conv.bias.len()];
            let gx = conv.backward(&x, &g, &mut gw, &mut gb, true).unwrap();
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let dx: f64 = gx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            let dw: f64 = gw.iter().zip(&conv.weight).map(|(a, b)| a * b).sum();
            let db: f64 = gb.iter().zip(&conv.bias).map(|(a, b)| a * b).sum();
            // x and w both enter bilinearly, so each of <gx,x> and <gw,w> equals the
            // bias-free part of <y,g>
            let bias_part = db;
            assert!((dx + bias_part - lhs).abs() < 1e-10);
            assert!((dw + bias_part - lhs).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(2, 3, 4, &mut rng);
        let y = upsample2(&x);
        assert_eq!((y.height, y.width), (6, 8));
        assert_eq!(y.at(1, 5, 7), x.at(1, 2, 3));
        let g = random_tensor(2, 6, 8, &mut rng);
        let gx = upsample2_backward(&g);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

//! Differentiable depth predictors split into an encoder and a decoder.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth_map::DepthMap;
use crate::nn::{relu, relu_backward, upsample2, upsample2_backward, Conv3x3, Tensor};

/// Three-channel input image, channel-major.
pub type Image = Tensor;

/// Which parameters an optimization touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefineMode {
    /// Encoder only; the decoder stays frozen.
    EncoderOnly,
    /// Encoder followed by decoder, concatenated in that order.
    FullModel,
}

/// A depth network `depth = h(g(image; θ_g); θ_h)` with flat parameter
/// access for the encoder `θ_g` and decoder `θ_h`.
pub trait DepthModel {
    /// Intermediate activations kept for the reverse pass.
    type Cache;

    fn encoder_len(&self) -> usize;
    fn decoder_len(&self) -> usize;
    fn encoder_params(&self) -> Vec<f64>;
    fn decoder_params(&self) -> Vec<f64>;
    fn set_encoder_params(&mut self, params: &[f64]);
    fn set_decoder_params(&mut self, params: &[f64]);

    fn forward(&self, image: &Image) -> (DepthMap, Self::Cache);

    /// Gradient of a scalar loss given its adjoint with respect to every
    /// output depth (row-major, one value per pixel). The result matches
    /// [`DepthModel::params`] for the same mode.
    fn backward(&self, cache: &Self::Cache, depth_adjoint: &[f64], mode: RefineMode) -> Vec<f64>;

    fn predict(&self, image: &Image) -> DepthMap {
        self.forward(image).0
    }

    fn params(&self, mode: RefineMode) -> Vec<f64> {
        match mode {
            RefineMode::EncoderOnly => self.encoder_params(),
            RefineMode::FullModel => {
                let mut p = self.encoder_params();
                p.extend(self.decoder_params());
                p
            }
        }
    }

    fn set_params(&mut self, mode: RefineMode, params: &[f64]) {
        let n = self.encoder_len();
        match mode {
            RefineMode::EncoderOnly => self.set_encoder_params(params),
            RefineMode::FullModel => {
                self.set_encoder_params(&params[..n]);
                self.set_decoder_params(&params[n..]);
            }
        }
    }

    fn param_len(&self, mode: RefineMode) -> usize {
        match mode {
            RefineMode::EncoderOnly => self.encoder_len(),
            RefineMode::FullModel => self.encoder_len() + self.decoder_len(),
        }
    }

    /// Encoder gradient for a given depth adjoint.
    fn encoder_gradient(&self, image: &Image, depth_adjoint: &[f64]) -> Vec<f64> {
        let (_, cache) = self.forward(image);
        self.backward(&cache, depth_adjoint, RefineMode::EncoderOnly)
    }
}

/// Smallest and largest depth the reference model can produce.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

/// Logits are clamped to this magnitude so the depth head never reaches its
/// bounds exactly.
const LOGIT_CLAMP: f64 = 30.0;

/// Small encoder-decoder used to exercise refinement end to end.
///
/// Encoder: two stride-2 3x3 convolutions (3→8→16) with ReLU. Decoder: two
/// rounds of nearest ×2 upsampling and 3x3 convolution (16→8 with ReLU,
/// 8→1), a sigmoid, and an inverse-depth head
/// `d = 1 / (1/MAX_DEPTH + (1/MIN_DEPTH - 1/MAX_DEPTH) σ)`.
///
/// Inputs must have 3 channels and height/width divisible by 4.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub enc1: Conv3x3,
    pub enc2: Conv3x3,
    pub dec1: Conv3x3,
    pub dec2: Conv3x3,
}

/// Named parameter blocks, in flattening order.
pub const PARAM_BLOCKS: [&str; 8] = [
    "enc1.weight",
    "enc1.bias",
    "enc2.weight",
    "enc2.bias",
    "dec1.weight",
    "dec1.bias",
    "dec2.weight",
    "dec2.bias",
];

pub struct ReferenceCache {
    input: Tensor,
    a1: Tensor,
    r1: Tensor,
    a2: Tensor,
    u1: Tensor,
    a3: Tensor,
    u2: Tensor,
    sigma: Vec<f64>,
    depth: Vec<f64>,
    clamped: Vec<bool>,
}

impl ReferenceModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            enc1: Conv3x3::init(3, 8, 2, &mut rng),
            enc2: Conv3x3::init(8, 16, 2, &mut rng),
            dec1: Conv3x3::init(16, 8, 1, &mut rng),
            dec2: Conv3x3::init(8, 1, 1, &mut rng),
        }
    }

    /// Checks that an image can be fed to the network.
    pub fn accepts(image: &Image) -> bool {
        image.channels == 3 && image.height.is_multiple_of(4) && image.width.is_multiple_of(4) && image.height > 0 && image.width > 0
    }

    fn layers(&self) -> [&Conv3x3; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    fn layers_mut(&mut self) -> [&mut Conv3x3; 4] {
        [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2]
    }

    /// `(name, values)` for every parameter block.
    pub fn named_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::with_capacity(8);
        for (i, l) in self.layers().into_iter().enumerate() {
            out.push((PARAM_BLOCKS[2 * i], l.weight.as_slice()));
            out.push((PARAM_BLOCKS[2 * i + 1], l.bias.as_slice()));
        }
        out
    }

    /// Replaces a named block; returns false on an unknown name or a length
    /// mismatch.
    pub fn set_block(&mut self, name: &str, values: &[f64]) -> bool {
        let Some(i) = PARAM_BLOCKS.iter().position(|&n| n == name) else { return false };
        let layer = &mut self.layers_mut()[i / 2];
        let dst = if i % 2 == 0 { &mut layer.weight } else { &mut layer.bias };
        if dst.len() != values.len() {
            return false;
        }
        dst.copy_from_slice(values);
        true
    }

    /// Offset range of each block inside the full (encoder ++ decoder)
    /// parameter vector.
    pub fn block_ranges(&self) -> Vec<(&'static str, core::ops::Range<usize>)> {
        let mut start = 0;
        self.named_blocks()
            .into_iter()
            .map(|(n, v)| {
                let r = start..start + v.len();
                start += v.len();
                (n, r)
            })
            .collect()
    }
}

fn flatten(layers: &[&Conv3x3]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weight);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten(layers: &mut [&mut Conv3x3], params: &[f64]) {
    let mut off = 0;
    for l in layers.iter_mut() {
        let n = l.weight.len();
        l.weight.copy_from_slice(&params[off..off + n]);
        off += n;
        let n = l.bias.len();
        l.bias.copy_from_slice(&params[off..off + n]);
        off += n;
    }
    assert_eq!(off, params.len(), "parameter vector length mismatch");
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

impl DepthModel for ReferenceModel {
    type Cache = ReferenceCache;

    fn encoder_len(&self) -> usize {
        self.enc1.param_count() + self.enc2.param_count()
    }

    fn decoder_len(&self) -> usize {
        self.dec1.param_count() + self.dec2.param_count()
    }

    fn encoder_params(&self) -> Vec<f64> {
        flatten(&[&self.enc1, &self.enc2])
    }

    fn decoder_params(&self) -> Vec<f64> {
        flatten(&[&self.dec1, &self.dec2])
    }

    fn set_encoder_params(&mut self, params: &[f64]) {
        unflatten(&mut [&mut self.enc1, &mut self.enc2], params);
    }

    fn set_decoder_params(&mut self, params: &[f64]) {
        unflatten(&mut [&mut self.dec1, &mut self.dec2], params);
    }

    fn forward(&self, image: &Image) -> (DepthMap, ReferenceCache) {
        assert!(Self::accepts(image), "image must be 3 x H x W with H, W divisible by 4");
        let a1 = self.enc1.forward(image);
        let r1 = relu(&a1);
        let a2 = self.enc2.forward(&r1);
        let u1 = upsample2(&relu(&a2));
        let a3 = self.dec1.forward(&u1);
        let u2 = upsample2(&relu(&a3));
        let z = self.dec2.forward(&u2);

        let (b_lo, b_hi) = (1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH);
        let n = z.data.len();
        let mut sigma = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for &logit in &z.data {
            clamped.push(libm::fabs(logit) > LOGIT_CLAMP);
            let s = sigmoid(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            sigma.push(s);
            depth.push(1.0 / (b_lo + (b_hi - b_lo) * s));
        }
        let map = DepthMap::from_values(z.width, z.height, depth.clone()).expect("shape");
        let cache = ReferenceCache { input: image.clone(), a1, r1, a2, u1, a3, u2, sigma, depth, clamped };
        (map, cache)
    }

    fn backward(&self, cache: &ReferenceCache, depth_adjoint: &[f64], mode: RefineMode) -> Vec<f64> {
        assert_eq!(depth_adjoint.len(), cache.depth.len(), "adjoint must cover every output pixel");
        let (b_lo, b_hi) = (1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH);
        let span = b_hi - b_lo;
        let (h, w) = (cache.u2.height, cache.u2.width);
        let mut g_z = Tensor::zeros(1, h, w);
        for i in 0..depth_adjoint.len() {
            if cache.clamped[i] || depth_adjoint[i] == 0.0 {
                continue;
            }
            let s = cache.sigma[i];
            let d = cache.depth[i];
            // d = 1 / (b_lo + span σ)  =>  ∂d/∂z = -span σ (1 - σ) d²
            g_z.data[i] = depth_adjoint[i] * (-span * s * (1.0 - s) * d * d);
        }

        let mut g_dec2_w = vec![0.0; self.dec2.weight.len()];
        let mut g_dec2_b = vec![0.0; self.dec2.bias.len()];
        let g_u2 = self.dec2.backward(&cache.u2, &g_z, &mut g_dec2_w, &mut g_dec2_b, true).expect("input grad");
        let mut g_a3 = upsample2_backward(&g_u2);
        relu_backward(&cache.a3, &mut g_a3);

        let mut g_dec1_w = vec![0.0; self.dec1.weight.len()];
        let mut g_dec1_b = vec![0.0; self.dec1.bias.len()];
        let g_u1 = self.dec1.backward(&cache.u1, &g_a3, &mut g_dec1_w, &mut g_dec1_b, true).expect("input grad");
        let mut g_a2 = upsample2_backward(&g_u1);
        relu_backward(&cache.a2, &mut g_a2);

        let mut g_enc2_w = vec![0.0; self.enc2.weight.len()];
        let mut g_enc2_b = vec![0.0; self.enc2.bias.len()];
        let mut g_a1 = self.enc2.backward(&cache.r1, &g_a2, &mut g_enc2_w, &mut g_enc2_b, true).expect("input grad");
        relu_backward(&cache.a1, &mut g_a1);

        let mut g_enc1_w = vec![0.0; self.enc1.weight.len()];
        let mut g_enc1_b = vec![0.0; self.enc1.bias.len()];
        self.enc1.backward(&cache.input, &g_a1, &mut g_enc1_w, &mut g_enc1_b, false);

        let mut grad = Vec::with_capacity(self.param_len(mode));
        for block in [g_enc1_w, g_enc1_b, g_enc2_w, g_enc2_b] {
            grad.extend(block);
        }
        if mode == RefineMode::FullModel {
            for block in [g_dec1_w, g_dec1_b, g_dec2_w, g_dec2_b] {
                grad.extend(block);
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_data(3, h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_partition_is_disjoint_and_complete() {
        let m = ReferenceModel::new(0);
        assert_eq!(m.encoder_len(), 8 * 3 * 9 + 8 + 16 * 8 * 9 + 16);
        assert_eq!(m.decoder_len(), 8 * 16 * 9 + 8 + 8 * 9 + 1);
        let total: usize = m.named_blocks().iter().map(|(_, v)| v.len()).sum();
        assert_eq!(total, m.encoder_len() + m.decoder_len());
        assert_eq!(m.params(RefineMode::FullModel).len(), total);
    }

    #[test]
    fn set_params_round_trip() {
        let mut m = ReferenceModel::new(1);
        let other = ReferenceModel::new(2);
        m.set_params(RefineMode::FullModel, &other.params(RefineMode::FullModel));
        assert_eq!(m, other);
    }

    #[test]
    fn output_shape_and_range() {
        let m = ReferenceModel::new(4);
        let d = m.predict(&image(1, 8, 12));
        assert_eq!((d.width(), d.height()), (12, 8));
        assert!(d.values().iter().all(|&v| v > MIN_DEPTH && v < MAX_DEPTH));
        assert_eq!(d.valid_count(), 96);
    }

    #[test]
    fn saturated_logits_stay_inside_range() {
        let mut m = ReferenceModel::new(4);
        for b in [1e6, -1e6] {
            m.dec2.bias[0] = b;
            let d = m.predict(&image(1, 8, 8));
            assert!(d.values().iter().all(|&v| v > MIN_DEPTH && v < MAX_DEPTH));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ReferenceModel::new(9);
        let x = image(2, 16, 16);
        assert_eq!(m.predict(&x), m.predict(&x));
    }

    #[test]
    fn encoder_only_gradient_has_encoder_length() {
        let m = ReferenceModel::new(3);
        let x = image(5, 8, 8);
        let g = m.encoder_gradient(&x, &vec![1.0; 64]);
        assert_eq!(g.len(), m.encoder_len());
        let (_, cache) = m.forward(&x);
        assert_eq!(m.backward(&cache, &vec![1.0; 64], RefineMode::FullModel).len(), m.encoder_len() + m.decoder_len());
    }
}

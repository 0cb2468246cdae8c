//! Test-time refinement: a reprojection-weighted L1 loss between the current
//! network depth and scale-aligned SfM depth, minimized with Adam.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adam::{adam_step, AdamConfig, AdamState, DimensionMismatch};
use crate::alignment::ScaleAlignment;
use crate::depth_map::DepthMap;
use crate::geometry::{SparseDepthEntry, SparseDepthFrame};
use crate::model::{DepthModel, Image, RefineMode};
use crate::recon::ImageId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("no inlier supervision for image {0}")]
    EmptyInliers(ImageId),
    #[error("no frame with an accepted alignment")]
    NoUsableFrames,
    #[error("invalid refinement config: {0}")]
    InvalidConfig(&'static str),
    #[error("alignment for image {alignment} does not match frame {frame}")]
    FrameMismatch { frame: ImageId, alignment: ImageId },
    #[error("inlier index {index} out of range for {len} entries")]
    BadInlierIndex { index: usize, len: usize },
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtrConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: RefineMode,
    pub sampling_seed: u64,
}

impl Default for TtrConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mode: RefineMode::EncoderOnly,
            sampling_seed: 0,
        }
    }
}

impl TtrConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RefineError::InvalidConfig("learning_rate must be positive"));
        }
        if self.steps < 1 {
            return Err(RefineError::InvalidConfig("steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RefineError::InvalidConfig("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(RefineError::InvalidConfig("eps must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Reprojection weight `exp(-r²)`.
#[inline]
pub fn reprojection_weight(reproj_error: f64) -> f64 {
    libm::exp(-reproj_error * reproj_error)
}

#[inline]
fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss over already-sampled entries: mean of `exp(-r²) |s sfm - nn|`.
pub fn ttr_loss(scale: f64, entries: &[SparseDepthEntry]) -> Result<f64, RefineError> {
    if entries.is_empty() {
        return Err(RefineError::EmptyInliers(0));
    }
    let sum: f64 = entries
        .iter()
        .map(|e| reprojection_weight(e.reproj_error) * libm::fabs(scale * e.sfm_depth - e.nn_depth))
        .sum();
    Ok(sum / entries.len() as f64)
}

/// One supervised pixel, in network-output coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionPoint {
    pub u: f64,
    pub v: f64,
    /// Scaled SfM depth `s · sfm`.
    pub target: f64,
    pub weight: f64,
}

/// Sparse targets for one image built from its stage-2 inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub image_id: ImageId,
    pub points: Vec<SupervisionPoint>,
}

impl Supervision {
    /// Targets at the extraction pixels of every stage-2 inlier.
    pub fn from_alignment(frame: &SparseDepthFrame, alignment: &ScaleAlignment) -> Result<Self, RefineError> {
        if frame.image_id != alignment.image_id {
            return Err(RefineError::FrameMismatch { frame: frame.image_id, alignment: alignment.image_id });
        }
        let mut points = Vec::with_capacity(alignment.stage2_inliers.len());
        for &i in &alignment.stage2_inliers {
            let e = frame.entries.get(i).ok_or(RefineError::BadInlierIndex { index: i, len: frame.entries.len() })?;
            points.push(SupervisionPoint {
                u: e.u,
                v: e.v,
                target: alignment.scale * e.sfm_depth,
                weight: reprojection_weight(e.reproj_error),
            });
        }
        if points.is_empty() {
            return Err(RefineError::EmptyInliers(frame.image_id));
        }
        Ok(Self { image_id: frame.image_id, points })
    }

    /// Maps pixel coordinates from a `from` resolution onto a `to`
    /// resolution with align-corners scaling.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        if from == to {
            return self.clone();
        }
        let f = |src: usize, dst: usize| if src > 1 { (dst - 1) as f64 / (src - 1) as f64 } else { 0.0 };
        let (fx, fy) = (f(from.0, to.0), f(from.1, to.1));
        let points = self.points.iter().map(|p| SupervisionPoint { u: p.u * fx, v: p.v * fy, ..*p }).collect();
        Self { image_id: self.image_id, points }
    }
}

/// Loss and its adjoint with respect to every pixel of `depth`.
///
/// The network depth at each supervision point is the bilinear sample of
/// `depth`, so the adjoint is scattered over the four taps. Points that
/// fall outside the map are skipped and do not count towards the mean.
pub fn loss_and_adjoint(depth: &DepthMap, supervision: &Supervision) -> Result<(f64, Vec<f64>), RefineError> {
    let mut adjoint = vec![0.0; depth.len()];
    let mut taps_used = Vec::with_capacity(supervision.points.len());
    let mut loss = 0.0;
    for p in &supervision.points {
        let Ok(taps) = depth.bilinear_taps(p.u, p.v) else { continue };
        let nn: f64 = taps.iter().map(|&(i, w)| w * depth.values()[i]).sum();
        let r = p.target - nn;
        loss += p.weight * libm::fabs(r);
        // d|target - nn| / d nn = -sign(target - nn)
        taps_used.push((taps, -p.weight * l1_sign(r)));
    }
    let n = taps_used.len();
    if n == 0 {
        return Err(RefineError::EmptyInliers(supervision.image_id));
    }
    let inv = 1.0 / n as f64;
    for (taps, g) in taps_used {
        if g == 0.0 {
            continue;
        }
        for (i, w) in taps {
            adjoint[i] += g * w * inv;
        }
    }
    Ok((loss * inv, adjoint))
}

/// Loss and exact gradient with respect to the parameters selected by
/// `mode`.
pub fn loss_gradient<M: DepthModel>(
    model: &M,
    image: &Image,
    supervision: &Supervision,
    mode: RefineMode,
) -> Result<(f64, Vec<f64>), RefineError> {
    let (depth, cache) = model.forward(image);
    let (loss, adjoint) = loss_and_adjoint(&depth, supervision)?;
    Ok((loss, model.backward(&cache, &adjoint, mode)))
}

/// Loss for the current parameters without a reverse pass.
pub fn evaluate_loss<M: DepthModel>(model: &M, image: &Image, supervision: &Supervision) -> Result<f64, RefineError> {
    loss_and_adjoint(&model.predict(image), supervision).map(|(l, _)| l)
}

/// One image of the sequence with its sparse depths and alignment; `None`
/// marks a rejected frame.
#[derive(Debug, Clone, Copy)]
pub struct RefineFrame<'a> {
    pub image: &'a Image,
    pub frame: &'a SparseDepthFrame,
    pub alignment: Option<&'a ScaleAlignment>,
    /// Resolution `(width, height)` of the pixel coordinates in `frame`.
    pub frame_size: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based step.
    pub step: usize,
    pub image_id: ImageId,
    /// Loss at the parameters before this step's update.
    pub loss: f64,
}

/// Refines a single model shared by the whole sequence.
///
/// Each step draws one usable frame uniformly with replacement, computes the
/// loss over its stage-2 inliers, and applies one Adam update to the
/// parameters selected by `config.mode`. The config is not validated here,
/// so `steps = 0` leaves the model untouched.
pub fn refine<M: DepthModel>(
    model: &mut M,
    frames: &[RefineFrame<'_>],
    config: &TtrConfig,
) -> Result<Vec<LossRecord>, RefineError> {
    let mut usable: Vec<(&Image, Supervision)> = Vec::new();
    for f in frames {
        let Some(alignment) = f.alignment else { continue };
        let sup = match Supervision::from_alignment(f.frame, alignment) {
            Ok(s) => s,
            Err(RefineError::EmptyInliers(_)) => continue,
            Err(e) => return Err(e),
        };
        let out = model.predict(f.image);
        usable.push((f.image, sup.rescaled(f.frame_size, (out.width(), out.height()))));
    }
    if usable.is_empty() {
        return Err(RefineError::NoUsableFrames);
    }

    let mode = config.mode;
    let adam = config.adam();
    let mut params = model.params(mode);
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.sampling_seed);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let (image, sup) = &usable[rng.random_range(0..usable.len())];
        let (loss, grad) = loss_gradient(model, image, sup, mode)?;
        adam_step(&mut params, &grad, &mut state, &adam)?;
        model.set_params(mode, &params);
        trace.push(LossRecord { step, image_id: sup.image_id, loss });
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-3, steps: 1500, seed: 0 }
    }
}

/// Mean `|log d - log t|` over valid target pixels and its depth adjoint.
pub fn log_l1_and_adjoint(depth: &DepthMap, target: &DepthMap) -> (f64, Vec<f64>) {
    let mut adjoint = vec![0.0; depth.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for i in 0..depth.len() {
        if !target.mask()[i] {
            continue;
        }
        let d = depth.values()[i];
        let r = libm::log(d) - libm::log(target.values()[i]);
        loss += libm::fabs(r);
        adjoint[i] = l1_sign(r) / d;
        n += 1;
    }
    if n == 0 {
        return (0.0, adjoint);
    }
    let inv = 1.0 / n as f64;
    adjoint.iter_mut().for_each(|a| *a *= inv);
    (loss * inv, adjoint)
}

/// Dense supervised fit of every parameter to `(image, target depth)`
/// pairs with a log-L1 loss, one randomly drawn pair per step. Used to
/// produce a pretrained model before refinement.
pub fn fit_dense<M: DepthModel>(
    model: &mut M,
    data: &[(Image, DepthMap)],
    config: &FitConfig,
) -> Result<Vec<f64>, RefineError> {
    if data.is_empty() {
        return Err(RefineError::NoUsableFrames);
    }
    let mode = RefineMode::FullModel;
    let adam = AdamConfig { lr: config.learning_rate, ..AdamConfig::default() };
    let mut params = model.params(mode);
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (image, target) = &data[rng.random_range(0..data.len())];
        let (depth, cache) = model.forward(image);
        let (loss, adjoint) = log_l1_and_adjoint(&depth, target);
        let grad = model.backward(&cache, &adjoint, mode);
        adam_step(&mut params, &grad, &mut state, &adam)?;
        model.set_params(mode, &params);
        losses.push(loss);
    }
    Ok(losses)
}

//! Per-image scale alignment between sparse SfM depths and network depths.
//!
//! The robust path runs in two stages. A one-parameter RANSAC over depth
//! ratios finds a strict inlier set under a depth-normalized squared
//! residual, the scale is refined on that set by weighted least squares with
//! weights `1 / nn²`, and the refined scale then selects a relaxed
//! (relative-error) inlier set used as supervision. [`align_median`] is the
//! plain median-of-ratios baseline.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::SparseDepthFrame;
use crate::recon::ImageId;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignmentError {
    #[error("no depth pairs to align")]
    EmptyInput,
    #[error("weighted least-squares denominator vanished")]
    DegenerateDenominator,
    #[error("depth pair {index} is not a pair of finite positive depths (sfm = {sfm}, nn = {nn})")]
    InvalidPair { index: usize, sfm: f64, nn: f64 },
    #[error("alignment rejected: {0}")]
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum RejectReason {
    #[error("{count} pairs, fewer than the required {min}")]
    TooFewPoints { count: usize, min: usize },
    #[error("stage-1 inlier ratio {ratio:.3} below {min}")]
    LowInlierRatio { ratio: f64, min: f64 },
}

/// A sparse (SfM depth, network depth) correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthPair {
    pub sfm: f64,
    pub nn: f64,
    pub reproj_error: f64,
    /// Position of the entry in its source frame.
    pub index: usize,
}

impl DepthPair {
    pub fn new(sfm: f64, nn: f64, index: usize) -> Self {
        Self { sfm, nn, reproj_error: 0.0, index }
    }
}

/// Pairs for every entry of a frame, indexed by entry position.
pub fn pairs_from_frame(frame: &SparseDepthFrame) -> Vec<DepthPair> {
    frame
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| DepthPair { sfm: e.sfm_depth, nn: e.nn_depth, reproj_error: e.reproj_error, index })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub tau: f64,
    pub iterations: usize,
    pub min_points: usize,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { tau: 0.5, iterations: 20, min_points: 5, min_inlier_ratio: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleAlignment {
    pub image_id: ImageId,
    /// Refined scale mapping SfM depths into network units.
    pub scale: f64,
    pub ransac_scale: f64,
    /// Strict inliers (entry indices, ascending).
    pub stage1_inliers: Vec<usize>,
    /// Relaxed inliers used as supervision (entry indices, ascending).
    pub stage2_inliers: Vec<usize>,
    pub iterations_used: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub scale: f64,
    /// Source indices of the inlier pairs, ascending.
    pub inliers: Vec<usize>,
    pub iterations_used: usize,
}

/// Depth-normalized squared residual of a pair under scale `s`.
#[inline]
pub fn strict_residual(s: f64, pair: &DepthPair) -> f64 {
    let pred = s * pair.sfm;
    let r = pred - pair.nn;
    r * r / pred
}

/// Relative absolute residual of a pair under scale `s`.
#[inline]
pub fn relaxed_residual(s: f64, pair: &DepthPair) -> f64 {
    let pred = s * pair.sfm;
    libm::fabs(pred - pair.nn) / pred
}

fn check_pairs(pairs: &[DepthPair]) -> Result<(), AlignmentError> {
    if pairs.is_empty() {
        return Err(AlignmentError::EmptyInput);
    }
    for p in pairs {
        let ok = p.sfm.is_finite() && p.nn.is_finite() && p.sfm > 0.0 && p.nn > 0.0;
        if !ok {
            return Err(AlignmentError::InvalidPair { index: p.index, sfm: p.sfm, nn: p.nn });
        }
    }
    Ok(())
}

/// One-parameter RANSAC over depth ratios.
///
/// Each iteration draws one pair uniformly, instantiates `s = nn / sfm`, and
/// counts pairs with `strict_residual <= tau`. The model with the most
/// inliers wins; ties go to the smaller residual sum over inliers, and sums
/// equal up to rounding keep the earlier hypothesis.
pub fn ransac_scale(pairs: &[DepthPair], tau: f64, iterations: usize, seed: u64) -> Result<RansacResult, AlignmentError> {
    check_pairs(pairs)?;
    let iterations = iterations.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, f64)> = None; // (count, residual sum, scale)
    for _ in 0..iterations {
        let sample = &pairs[rng.random_range(0..pairs.len())];
        let s = sample.nn / sample.sfm;
        let (count, sum) = pairs.iter().fold((0usize, 0.0f64), |(c, acc), p| {
            let r = strict_residual(s, p);
            if r <= tau { (c + 1, acc + r) } else { (c, acc) }
        });
        let better = match best {
            None => true,
            Some((bc, bs, _)) => count > bc || (count == bc && sum < bs - 1e-9 * tau * count as f64),
        };
        if better {
            best = Some((count, sum, s));
        }
    }
    let (_, _, scale) = best.expect("at least one iteration");
    let mut inliers: Vec<usize> = pairs.iter().filter(|p| strict_residual(scale, p) <= tau).map(|p| p.index).collect();
    inliers.sort_unstable();
    Ok(RansacResult { scale, inliers, iterations_used: iterations })
}

/// Closed-form minimizer of `Σ w (s·sfm - nn)²` with `w = 1 / nn²`:
/// `s = Σ(sfm/nn) / Σ(sfm/nn)²`.
pub fn weighted_ls_scale(pairs: &[DepthPair]) -> Result<f64, AlignmentError> {
    check_pairs(pairs)?;
    let (num, den) = pairs.iter().fold((0.0, 0.0), |(n, d), p| {
        let q = p.sfm / p.nn;
        (n + q, d + q * q)
    });
    if !(den > 0.0) || !den.is_finite() {
        return Err(AlignmentError::DegenerateDenominator);
    }
    Ok(num / den)
}

/// Source indices of pairs whose relative error under `scale` is within
/// `tau`.
pub fn select_final_inliers(pairs: &[DepthPair], scale: f64, tau: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = pairs.iter().filter(|p| relaxed_residual(scale, p) <= tau).map(|p| p.index).collect();
    idx.sort_unstable();
    idx
}

/// Median of the per-pair ratios `nn / sfm`.
pub fn align_median(pairs: &[DepthPair]) -> Result<f64, AlignmentError> {
    check_pairs(pairs)?;
    let ratios: Vec<f64> = pairs.iter().map(|p| p.nn / p.sfm).collect();
    Ok(stats::median(&ratios).expect("non-empty"))
}

/// Full two-stage alignment of one frame.
pub fn align_frame(frame: &SparseDepthFrame, config: &AlignConfig) -> Result<ScaleAlignment, AlignmentError> {
    let pairs = pairs_from_frame(frame);
    align_pairs(frame.image_id, &pairs, config)
}

pub fn align_pairs(image_id: ImageId, pairs: &[DepthPair], config: &AlignConfig) -> Result<ScaleAlignment, AlignmentError> {
    check_pairs(pairs)?;
    if pairs.len() < config.min_points {
        return Err(AlignmentError::Rejected(RejectReason::TooFewPoints { count: pairs.len(), min: config.min_points }));
    }
    let ransac = ransac_scale(pairs, config.tau, config.iterations, config.seed)?;
    let ratio = ransac.inliers.len() as f64 / pairs.len() as f64;
    if ratio < config.min_inlier_ratio {
        return Err(AlignmentError::Rejected(RejectReason::LowInlierRatio { ratio, min: config.min_inlier_ratio }));
    }
    let inlier_pairs: Vec<DepthPair> =
        pairs.iter().filter(|p| strict_residual(ransac.scale, p) <= config.tau).copied().collect();
    let scale = weighted_ls_scale(&inlier_pairs)?;
    let stage2 = select_final_inliers(pairs, scale, config.tau);
    Ok(ScaleAlignment {
        image_id,
        scale,
        ransac_scale: ransac.scale,
        stage1_inliers: ransac.inliers,
        stage2_inliers: stage2,
        iterations_used: ransac.iterations_used,
        seed: config.seed,
    })
}

/// Median-of-ratios alignment packaged like [`align_frame`]: every pair is a
/// stage-1 inlier and the relaxed test selects the supervision set.
pub fn align_frame_median(frame: &SparseDepthFrame, config: &AlignConfig) -> Result<ScaleAlignment, AlignmentError> {
    let pairs = pairs_from_frame(frame);
    check_pairs(&pairs)?;
    if pairs.len() < config.min_points {
        return Err(AlignmentError::Rejected(RejectReason::TooFewPoints { count: pairs.len(), min: config.min_points }));
    }
    let scale = align_median(&pairs)?;
    Ok(ScaleAlignment {
        image_id: frame.image_id,
        scale,
        ransac_scale: scale,
        stage1_inliers: (0..pairs.len()).collect(),
        stage2_inliers: select_final_inliers(&pairs, scale, config.tau),
        iterations_used: 0,
        seed: config.seed,
    })
}

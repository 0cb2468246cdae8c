//! Dense depth evaluation: the seven standard error/accuracy measures,
//! per-image median scaling, the Eigen crop and depth-binned errors.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::depth_map::DepthMap;
use crate::stats::median_in_place;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred:?}, ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("no pixel passes the evaluation mask")]
    EmptyMask,
    #[error("median of prediction or ground truth is zero")]
    ZeroMedian,
    #[error("bin edges must be strictly increasing within [min_depth, max_depth]")]
    BadBinEdges,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixel_count: usize,
}

impl DepthMetrics {
    /// Values in reporting order: abs_rel, sq_rel, rmse, rmse_log, δ1, δ2, δ3.
    pub fn as_array(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }

    pub const NAMES: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    /// Pixel-count-weighted mean of per-image metrics. RMSE-type entries
    /// are recombined through their mean squares.
    pub fn aggregate(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        let n: usize = items.iter().map(|m| m.valid_pixel_count).sum();
        if n == 0 {
            return None;
        }
        let w = |m: &DepthMetrics| m.valid_pixel_count as f64 / n as f64;
        let mut out = DepthMetrics { valid_pixel_count: n, ..Default::default() };
        let (mut mse, mut mse_log) = (0.0, 0.0);
        for m in items {
            let k = w(m);
            out.abs_rel += k * m.abs_rel;
            out.sq_rel += k * m.sq_rel;
            mse += k * m.rmse * m.rmse;
            mse_log += k * m.rmse_log * m.rmse_log;
            out.delta1 += k * m.delta1;
            out.delta2 += k * m.delta2;
            out.delta3 += k * m.delta3;
        }
        out.rmse = libm::sqrt(mse);
        out.rmse_log = libm::sqrt(mse_log);
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crop {
    None,
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    Median,
    None,
    /// Fixed factor applied to the prediction.
    Precomputed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub crop: Crop,
    pub scaling: Scaling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { min_depth: 1e-3, max_depth: 80.0, crop: Crop::None, scaling: Scaling::Median }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(MetricsError::InvalidConfig("need 0 < min_depth < max_depth"));
        }
        if let Scaling::Precomputed(k) = self.scaling {
            if !(k > 0.0 && k.is_finite()) {
                return Err(MetricsError::InvalidConfig("precomputed scale must be positive"));
            }
        }
        Ok(())
    }
}

/// Row range `[top, bottom)` and column range `[left, right)` of the Eigen
/// crop.
pub fn eigen_crop_bounds(height: usize, width: usize) -> ((usize, usize), (usize, usize)) {
    let f = |frac: f64, n: usize| (libm::floor(frac * n as f64) as usize).min(n);
    (
        (f(0.40810811, height), f(0.99189189, height)),
        (f(0.03594771, width), f(0.96405229, width)),
    )
}

/// Row-major mask of the Eigen crop.
pub fn eigen_crop_mask(height: usize, width: usize) -> Vec<bool> {
    let ((r0, r1), (c0, c1)) = eigen_crop_bounds(height, width);
    let mut mask = vec![false; height * width];
    for y in r0..r1 {
        for x in c0..c1 {
            mask[y * width + x] = true;
        }
    }
    mask
}

pub fn crop_mask(crop: Crop, height: usize, width: usize) -> Vec<bool> {
    match crop {
        Crop::None => vec![true; height * width],
        Crop::Eigen => eigen_crop_mask(height, width),
    }
}

fn check_shape(pred: &DepthMap, gt: &DepthMap) -> Result<(), MetricsError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(MetricsError::ShapeMismatch {
            pred: (pred.width(), pred.height()),
            gt: (gt.width(), gt.height()),
        });
    }
    Ok(())
}

/// Pixels evaluated under `config`: inside the crop, valid in both maps, and
/// with ground truth strictly inside `(min_depth, max_depth)`.
pub fn evaluation_mask(pred: &DepthMap, gt: &DepthMap, config: &EvalConfig) -> Result<Vec<bool>, MetricsError> {
    check_shape(pred, gt)?;
    let mut mask = crop_mask(config.crop, gt.height(), gt.width());
    for (i, m) in mask.iter_mut().enumerate() {
        let g = gt.values()[i];
        *m = *m
            && gt.mask()[i]
            && pred.mask()[i]
            && g > config.min_depth
            && g < config.max_depth
            && pred.values()[i].is_finite();
    }
    Ok(mask)
}

/// Ratio `median(gt) / median(pred)` over the masked pixels.
pub fn median_scale_factor(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<f64, MetricsError> {
    check_shape(pred, gt)?;
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            p.push(pred.values()[i]);
            g.push(gt.values()[i]);
        }
    }
    if p.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let mp = median_in_place(&mut p);
    let mg = median_in_place(&mut g);
    if mp == 0.0 || mg == 0.0 {
        return Err(MetricsError::ZeroMedian);
    }
    Ok(mg / mp)
}

/// Prediction multiplied by `median(gt)/median(pred)` over `mask`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<DepthMap, MetricsError> {
    Ok(pred.scaled(median_scale_factor(pred, gt, mask)?))
}

/// Metrics over the masked pixels for an already-scaled prediction. The
/// prediction is clamped to `[min_depth, max_depth]`.
pub fn metrics_on_mask(pred: &DepthMap, gt: &DepthMap, mask: &[bool], min_depth: f64, max_depth: f64) -> Result<DepthMetrics, MetricsError> {
    check_shape(pred, gt)?;
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    const T1: f64 = 1.25;
    const T2: f64 = 1.25 * 1.25;
    const T3: f64 = 1.25 * 1.25 * 1.25;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let g = gt.values()[i];
        let p = pred.values()[i].clamp(min_depth, max_depth);
        let diff = p - g;
        abs_rel += libm::fabs(diff) / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        let dl = libm::log(p) - libm::log(g);
        se_log += dl * dl;
        let ratio = (p / g).max(g / p);
        d1 += (ratio < T1) as usize;
        d2 += (ratio < T2) as usize;
        d3 += (ratio < T3) as usize;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: libm::sqrt(se / nf),
        rmse_log: libm::sqrt(se_log / nf),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        valid_pixel_count: n,
    })
}

/// Applies `config.scaling` to the prediction over `mask`.
pub fn apply_scaling(pred: &DepthMap, gt: &DepthMap, mask: &[bool], scaling: Scaling) -> Result<DepthMap, MetricsError> {
    match scaling {
        Scaling::None => Ok(pred.clone()),
        Scaling::Precomputed(k) => Ok(pred.scaled(k)),
        Scaling::Median => median_scale(pred, gt, mask),
    }
}

/// Full evaluation of one prediction against ground truth.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, config: &EvalConfig) -> Result<DepthMetrics, MetricsError> {
    config.validate()?;
    let mask = evaluation_mask(pred, gt, config)?;
    let scaled = apply_scaling(pred, gt, &mask, config.scaling)?;
    metrics_on_mask(&scaled, gt, &mask, config.min_depth, config.max_depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinMetrics {
    pub lo: f64,
    pub hi: f64,
    /// `None` when no evaluated pixel has ground truth in `[lo, hi)`.
    pub metrics: Option<DepthMetrics>,
}

impl BinMetrics {
    pub fn is_empty(&self) -> bool {
        self.metrics.is_none()
    }
}

/// Metrics restricted to ground-truth depth bins `[edge_i, edge_{i+1})`.
///
/// Scaling is determined once over the whole evaluation mask, so bins share
/// the scale of the whole-image evaluation.
pub fn binned_metrics(pred: &DepthMap, gt: &DepthMap, config: &EvalConfig, edges: &[f64]) -> Result<Vec<BinMetrics>, MetricsError> {
    config.validate()?;
    let ordered = edges.windows(2).all(|w| w[0] < w[1]);
    let in_range = edges.iter().all(|&e| e >= config.min_depth && e <= config.max_depth);
    if edges.len() < 2 || !ordered || !in_range {
        return Err(MetricsError::BadBinEdges);
    }
    let mask = evaluation_mask(pred, gt, config)?;
    let scaled = apply_scaling(pred, gt, &mask, config.scaling)?;
    let mut out = Vec::with_capacity(edges.len() - 1);
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let bin_mask: Vec<bool> = mask
            .iter()
            .zip(gt.values())
            .map(|(&m, &g)| m && g >= lo && g < hi)
            .collect();
        let metrics = match metrics_on_mask(&scaled, gt, &bin_mask, config.min_depth, config.max_depth) {
            Ok(m) => Some(m),
            Err(MetricsError::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        out.push(BinMetrics { lo, hi, metrics });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(w: usize, h: usize, v: &[f64]) -> DepthMap {
        DepthMap::from_values(w, h, v.to_vec()).unwrap()
    }

    fn none_cfg() -> EvalConfig {
        EvalConfig { scaling: Scaling::None, ..EvalConfig::default() }
    }

    /// Per-pixel accumulation written independently of the implementation.
    fn brute_force(pred: &[f64], gt: &[f64], lo: f64, hi: f64) -> [f64; 7] {
        let sel: Vec<(f64, f64)> = pred
            .iter()
            .zip(gt)
            .filter(|(_, &g)| g > lo && g < hi)
            .map(|(&p, &g)| (if p < lo { lo } else if p > hi { hi } else { p }, g))
            .collect();
        let n = sel.len() as f64;
        let mean = |f: &dyn Fn(f64, f64) -> f64| sel.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
        [
            mean(&|p, g| (p - g).abs() / g),
            mean(&|p, g| (p - g).powi(2) / g),
            mean(&|p, g| (p - g).powi(2)).sqrt(),
            mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
            mean(&|p, g| if (p / g).max(g / p) < 1.25 { 1.0 } else { 0.0 }),
            mean(&|p, g| if (p / g).max(g / p) < 1.25f64.powi(2) { 1.0 } else { 0.0 }),
            mean(&|p, g| if (p / g).max(g / p) < 1.25f64.powi(3) { 1.0 } else { 0.0 }),
        ]
    }

    #[test]
    fn identical_maps() {
        let gt = map(2, 2, &[10.0, 20.0, 40.0, 70.0]);
        let m = compute_metrics(&gt, &gt, &none_cfg()).unwrap();
        assert_eq!(m.as_array(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(m.valid_pixel_count, 4);
    }

    #[test]
    fn doubled_prediction() {
        let gt = map(2, 2, &[1.0, 2.0, 4.0, 8.0]);
        let m = compute_metrics(&gt.scaled(2.0), &gt, &none_cfg()).unwrap();
        assert_relative_eq!(m.abs_rel, 1.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn four_pixel_example() {
        let gt = map(2, 2, &[10.0, 20.0, 40.0, 80.0 - 1e-9]);
        let pred = map(2, 2, &[11.0, 18.0, 44.0, 70.0]);
        // the last pixel sits just below the 80 cap so it is evaluated
        let m = compute_metrics(&pred, &gt, &none_cfg()).unwrap();
        assert_relative_eq!(m.abs_rel, 0.10625, epsilon = 1e-9);
        let b = brute_force(pred.values(), gt.values(), 1e-3, 80.0);
        for (a, e) in m.as_array().iter().zip(b) {
            assert_relative_eq!(*a, e, epsilon = 1e-12);
        }
        // at exactly 80 the pixel is outside (min, max) and drops out
        let gt80 = map(2, 2, &[10.0, 20.0, 40.0, 80.0]);
        assert_eq!(compute_metrics(&pred, &gt80, &none_cfg()).unwrap().valid_pixel_count, 3);
    }

    #[test]
    fn median_scale_removes_global_factor() {
        let gt = DepthMap::from_fn(5, 4, |x, y| 1.0 + x as f64 + 3.0 * y as f64);
        let mask = vec![true; 20];
        let s = median_scale(&gt.scaled(2.0), &gt, &mask).unwrap();
        for (a, b) in s.values().iter().zip(gt.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(median_scale(&gt, &gt, &mask).unwrap(), gt);
        assert_eq!(median_scale(&gt, &gt, &[false; 20]), Err(MetricsError::EmptyMask));
    }

    #[test]
    fn median_scale_ignores_single_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt_v: Vec<f64> = (0..100).map(|_| rng.random_range(1.0..50.0)).collect();
        let mut p_v = gt_v.iter().map(|g| g * 1.5).collect::<Vec<_>>();
        p_v[17] *= 1000.0;
        let (gt, pred) = (map(10, 10, &gt_v), map(10, 10, &p_v));
        let k = median_scale_factor(&pred, &gt, &[true; 100]).unwrap();
        let sorted_median = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            0.5 * (s[49] + s[50])
        };
        assert_relative_eq!(k, sorted_median(&gt_v) / sorted_median(&p_v), epsilon = 1e-12);
        assert_relative_eq!(k, 1.0 / 1.5, epsilon = 0.02);
    }

    #[test]
    fn eigen_crop_on_kitti_resolution() {
        assert_eq!(eigen_crop_bounds(375, 1242), ((153, 371), (44, 1197)));
        let mask = eigen_crop_mask(375, 1242);
        assert_eq!(mask.iter().filter(|&&m| m).count(), (371 - 153) * (1197 - 44));
        assert!(mask[153 * 1242 + 44] && !mask[152 * 1242 + 44] && !mask[153 * 1242 + 1197]);
    }

    #[test]
    fn eigen_crop_degenerate() {
        assert_eq!(eigen_crop_mask(1, 1), vec![false]);
        assert!(crop_mask(Crop::None, 3, 4).iter().all(|&m| m));
    }

    #[test]
    fn single_bin_equals_whole_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = DepthMap::from_fn(8, 8, |_, _| rng.random_range(1.0..70.0));
        let pred = DepthMap::from_fn(8, 8, |_, _| rng.random_range(1.0..70.0));
        let cfg = EvalConfig::default();
        let bins = binned_metrics(&pred, &gt, &cfg, &[cfg.min_depth, cfg.max_depth]).unwrap();
        assert_eq!(bins[0].metrics.unwrap(), compute_metrics(&pred, &gt, &cfg).unwrap());
    }

    #[test]
    fn empty_bin_is_flagged() {
        let gt = DepthMap::filled(4, 4, 5.0);
        let bins = binned_metrics(&gt, &gt, &EvalConfig::default(), &[1.0, 10.0, 50.0]).unwrap();
        assert!(!bins[0].is_empty());
        assert!(bins[1].is_empty());
        let cfg = EvalConfig::default();
        assert_eq!(binned_metrics(&gt, &gt, &cfg, &[10.0, 5.0]), Err(MetricsError::BadBinEdges));
        assert_eq!(binned_metrics(&gt, &gt, &cfg, &[10.0, 90.0]), Err(MetricsError::BadBinEdges));
    }

    fn random_pair(seed: u64, w: usize, h: usize) -> (DepthMap, DepthMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = DepthMap::from_fn(w, h, |_, _| rng.random_range(0.0005..95.0));
        let pred = DepthMap::from_fn(w, h, |_, _| rng.random_range(0.0001..120.0));
        (pred, gt)
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force(seed in any::<u64>()) {
            let (pred, gt) = random_pair(seed, 9, 7);
            let m = compute_metrics(&pred, &gt, &none_cfg()).unwrap();
            let b = brute_force(pred.values(), gt.values(), 1e-3, 80.0);
            for (a, e) in m.as_array().iter().zip(b) {
                prop_assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }

        #[test]
        fn delta_is_monotone(seed in any::<u64>()) {
            let (pred, gt) = random_pair(seed, 6, 6);
            let m = compute_metrics(&pred, &gt, &EvalConfig::default()).unwrap();
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
            prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
        }

        #[test]
        fn median_scaling_removes_any_global_factor(seed in any::<u64>(), k in 0.01..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = DepthMap::from_fn(7, 5, |_, _| rng.random_range(0.5..60.0));
            let m = compute_metrics(&gt.scaled(k), &gt, &EvalConfig::default()).unwrap();
            prop_assert_eq!(m.delta1, 1.0);
            prop_assert!(m.abs_rel < 1e-12);
        }

        #[test]
        fn bins_recombine_mean_metrics(seed in any::<u64>()) {
            let (pred, gt) = random_pair(seed, 10, 10);
            let cfg = EvalConfig::default();
            let whole = compute_metrics(&pred, &gt, &cfg).unwrap();
            let bins = binned_metrics(&pred, &gt, &cfg, &[cfg.min_depth, 5.0, 20.0, 45.0, cfg.max_depth]).unwrap();
            let n: usize = bins.iter().filter_map(|b| b.metrics).map(|m| m.valid_pixel_count).sum();
            prop_assert_eq!(n, whole.valid_pixel_count);
            let comb = |f: fn(&DepthMetrics) -> f64| bins
                .iter()
                .filter_map(|b| b.metrics)
                .map(|m| f(&m) * m.valid_pixel_count as f64)
                .sum::<f64>() / n as f64;
            prop_assert!((comb(|m| m.abs_rel) - whole.abs_rel).abs() < 1e-12);
            prop_assert!((comb(|m| m.sq_rel) - whole.sq_rel).abs() < 1e-12 * whole.sq_rel.max(1.0));
        }
    }

    #[test]
    fn aggregate_of_one_is_identity() {
        let (pred, gt) = random_pair(3, 5, 5);
        let m = compute_metrics(&pred, &gt, &EvalConfig::default()).unwrap();
        let a = DepthMetrics::aggregate(&[m]).unwrap();
        assert_relative_eq!(a.rmse, m.rmse, epsilon = 1e-12);
        assert_relative_eq!(a.abs_rel, m.abs_rel, epsilon = 1e-12);
    }
}

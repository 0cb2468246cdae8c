//! Run configuration: a TOML file whose every key is optional and whose
//! unknown keys are rejected. Defaults reproduce the reference settings
//! (tau 0.5, 20 RANSAC iterations, Adam at 1e-4 for 200 steps).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sfm_ttr_core::metrics::{Crop, Scaling};
use sfm_ttr_core::synth::{CameraPath, NoiseConfig, SceneConfig};
use sfm_ttr_core::refine::FitConfig;
use sfm_ttr_core::{AlignConfig, CameraIntrinsics, EvalConfig, RefineMode, TtrConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    /// Strict RANSAC, weighted least squares, relaxed inlier selection.
    Robust,
    /// Median of per-point depth ratios.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    EncoderOnly,
    FullModel,
}

impl From<ModeName> for RefineMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::EncoderOnly => RefineMode::EncoderOnly,
            ModeName::FullModel => RefineMode::FullModel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropName {
    None,
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScaling {
    Median,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathName {
    Forward,
    Orbit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub tau: f64,
    pub iterations: usize,
    pub min_points: usize,
    pub min_inlier_ratio: f64,
    pub method: AlignMethod,
}

impl Default for AlignSection {
    fn default() -> Self {
        let d = AlignConfig::default();
        Self {
            tau: d.tau,
            iterations: d.iterations,
            min_points: d.min_points,
            min_inlier_ratio: d.min_inlier_ratio,
            method: AlignMethod::Robust,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: ModeName,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = TtrConfig::default();
        Self {
            learning_rate: d.learning_rate,
            steps: d.steps,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            mode: ModeName::EncoderOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub min_depth: f64,
    pub max_depth: f64,
    pub crop: CropName,
    pub scaling: EvalScaling,
    /// Ground-truth depth bin edges for `bin-errors`; empty means eight
    /// equal bins spanning `[min_depth, max_depth]`.
    pub bin_edges: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self { min_depth: d.min_depth, max_depth: d.max_depth, crop: CropName::None, scaling: EvalScaling::Median, bin_edges: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sfm_rel_sigma: f64,
    pub nn_rel_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_range: [f64; 2],
    pub reproj_noise_sigma: f64,
    pub bias_amplitude: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseConfig::default();
        Self {
            sfm_rel_sigma: d.sfm_rel_sigma,
            nn_rel_sigma: d.nn_rel_sigma,
            outlier_fraction: d.outlier_fraction,
            outlier_range: [d.outlier_range.0, d.outlier_range.1],
            reproj_noise_sigma: d.reproj_noise_sigma,
            bias_amplitude: d.bias_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub n_images: usize,
    pub n_points: usize,
    pub camera_path: PathName,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub depth_range: [f64; 2],
    /// Network depth is ground truth divided by this factor.
    pub gt_scale: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let d = SceneConfig::default();
        Self {
            n_images: d.n_images,
            n_points: d.n_points,
            camera_path: PathName::Forward,
            width: d.intrinsics.width,
            height: d.intrinsics.height,
            focal: d.intrinsics.fx,
            depth_range: [d.depth_range.0, d.depth_range.1],
            gt_scale: d.gt_scale,
        }
    }
}

/// Dense fit of the reference model to the pseudo-network maps, used by
/// `simulate` to produce the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self { learning_rate: d.learning_rate, steps: d.steps }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub align: AlignSection,
    pub refine: RefineSection,
    pub eval: EvalSection,
    pub noise: NoiseSection,
    pub scene: SceneSection,
    pub pretrain: PretrainSection,
}

/// Independent seed streams derived from the run seed.
pub mod stream {
    pub const SCENE: u64 = 0;
    pub const NETWORK: u64 = 1;
    pub const SFM_NOISE: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const ALIGN: u64 = 5;
    pub const REFINE: u64 = 6;
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.ttr(0).validate().map_err(|e| bad(&e))?;
        self.eval_config().validate().map_err(|e| bad(&e))?;
        self.noise_config().validate().map_err(|e| bad(&e))?;
        let a = &self.align;
        if !(a.tau > 0.0 && a.tau.is_finite()) || a.iterations == 0 || !(0.0..=1.0).contains(&a.min_inlier_ratio) {
            return Err(ConfigError::Invalid("align needs tau > 0, iterations >= 1, min_inlier_ratio in [0, 1]".into()));
        }
        let s = &self.scene;
        if s.n_images < 2 || s.n_points == 0 || !s.width.is_multiple_of(4) || !s.height.is_multiple_of(4) || s.width == 0 || s.height == 0 {
            return Err(ConfigError::Invalid("scene needs >= 2 images, >= 1 point and sizes divisible by 4".into()));
        }
        if !(s.focal > 0.0 && s.gt_scale > 0.0 && 0.0 < s.depth_range[0] && s.depth_range[0] < s.depth_range[1]) {
            return Err(ConfigError::Invalid("scene needs focal > 0, gt_scale > 0 and 0 < near < far".into()));
        }
        if !(self.pretrain.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("pretrain learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn align_config(&self, image_id: u32) -> AlignConfig {
        AlignConfig {
            tau: self.align.tau,
            iterations: self.align.iterations,
            min_points: self.align.min_points,
            min_inlier_ratio: self.align.min_inlier_ratio,
            seed: derive_seed(self.seed, stream::ALIGN, u64::from(image_id)),
        }
    }

    pub fn ttr(&self, index: u64) -> TtrConfig {
        let r = &self.refine;
        TtrConfig {
            learning_rate: r.learning_rate,
            steps: r.steps,
            beta1: r.beta1,
            beta2: r.beta2,
            eps: r.eps,
            mode: r.mode.into(),
            sampling_seed: derive_seed(self.seed, stream::REFINE, index),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            min_depth: self.eval.min_depth,
            max_depth: self.eval.max_depth,
            crop: match self.eval.crop {
                CropName::None => Crop::None,
                CropName::Eigen => Crop::Eigen,
            },
            scaling: match self.eval.scaling {
                EvalScaling::Median => Scaling::Median,
                EvalScaling::None => Scaling::None,
            },
        }
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        if !self.eval.bin_edges.is_empty() {
            return self.eval.bin_edges.clone();
        }
        let (lo, hi) = (self.eval.min_depth, self.eval.max_depth);
        (0..=8).map(|i| if i == 8 { hi } else { lo + (hi - lo) * i as f64 / 8.0 }).collect()
    }

    pub fn noise_config(&self) -> NoiseConfig {
        let n = &self.noise;
        NoiseConfig {
            sfm_rel_sigma: n.sfm_rel_sigma,
            nn_rel_sigma: n.nn_rel_sigma,
            outlier_fraction: n.outlier_fraction,
            outlier_range: (n.outlier_range[0], n.outlier_range[1]),
            reproj_noise_sigma: n.reproj_noise_sigma,
            bias_amplitude: n.bias_amplitude,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        let s = &self.scene;
        let (cx, cy) = ((s.width as f64 - 1.0) / 2.0, (s.height as f64 - 1.0) / 2.0);
        SceneConfig {
            n_images: s.n_images,
            n_points: s.n_points,
            camera_path: match s.camera_path {
                PathName::Forward => CameraPath::Forward,
                PathName::Orbit => CameraPath::Orbit,
            },
            intrinsics: CameraIntrinsics::new(1, s.width, s.height, s.focal, s.focal, cx, cy),
            depth_range: (s.depth_range[0], s.depth_range[1]),
            gt_scale: s.gt_scale,
            seed: derive_seed(self.seed, stream::SCENE, 0),
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.pretrain.learning_rate,
            steps: self.pretrain.steps,
            seed: derive_seed(self.seed, stream::PRETRAIN, 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.align.tau, c.align.iterations), (0.5, 20));
        assert_eq!((c.refine.learning_rate, c.refine.steps), (1e-4, 200));
        assert_eq!(c.refine.mode, ModeName::EncoderOnly);
        assert_eq!(c.eval.max_depth, 80.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[align]\ntau = 0.3\nthreshold = 2").is_err());
        assert!(RunConfig::from_toml("[refine]\nmode = \"decoder_only\"").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[refine]\nmode = \"full_model\"\n[align]\nmethod = \"median\"").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.refine.mode, ModeName::FullModel);
        assert_eq!(c.refine.steps, 200);
        assert_eq!(c.align.method, AlignMethod::Median);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[refine]\nsteps = 0").is_err());
        assert!(RunConfig::from_toml("[noise]\noutlier_fraction = 0.6").is_err());
        assert!(RunConfig::from_toml("[scene]\nwidth = 30").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig { seed: 3, ..RunConfig::default() };
        c.eval.bin_edges = vec![1.0, 2.0];
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn default_bins_cover_the_range() {
        let e = RunConfig::default().bin_edges();
        assert_eq!(e.len(), 9);
        assert_eq!((e[0], e[8]), (1e-3, 80.0));
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn seed_streams_differ() {
        let a = derive_seed(1, stream::ALIGN, 1);
        assert_ne!(a, derive_seed(1, stream::ALIGN, 2));
        assert_ne!(a, derive_seed(2, stream::ALIGN, 1));
        assert_ne!(a, derive_seed(1, stream::REFINE, 1));
        assert_eq!(a, derive_seed(1, stream::ALIGN, 1));
    }
}

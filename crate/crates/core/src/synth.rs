//! Seeded synthetic scenes and corruption models.
//!
//! A scene is a gently undulating ground surface seen by pinhole cameras
//! pitched towards it. Points are sampled on the surface through random
//! pixels, so close depths are more frequent than far ones. Ground-truth
//! depth maps are rendered per pixel and every tracked point is splatted
//! into its 2x2 bilinear footprint, which makes the bilinear sample at each
//! observation equal the point's depth.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::depth_map::DepthMap;
use crate::geometry::{project_camera_point, CameraPose, SparseDepthEntry, SparseDepthFrame};
use crate::model::Image;
use crate::nn::Tensor;
use crate::recon::{CameraIntrinsics, ImageId, Observation, PointId, PosedImage, Reconstruction, ScenePoint, TrackEntry};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraPath {
    /// Cameras translate along the viewing direction.
    Forward,
    /// Cameras yaw over ±15° around a pivot on the ground.
    Orbit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_images: usize,
    pub n_points: usize,
    pub camera_path: CameraPath,
    /// Shared pinhole camera; its id is reused for the single camera.
    pub intrinsics: CameraIntrinsics,
    /// `(near, far)` bounds of every ground-truth depth.
    pub depth_range: (f64, f64),
    /// Network depth is ground truth divided by this factor.
    pub gt_scale: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_images: 5,
            n_points: 300,
            camera_path: CameraPath::Forward,
            intrinsics: CameraIntrinsics::new(1, 64, 64, 64.0, 64.0, 31.5, 31.5),
            depth_range: (4.0, 40.0),
            gt_scale: 1.0 / 1.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Exact reconstruction: zero reprojection error everywhere.
    pub reconstruction: Reconstruction,
    pub gt_depth_maps: BTreeMap<ImageId, DepthMap>,
    /// Three-channel inputs for the reference model: a depth-dependent haze
    /// term, a surface texture, and their product.
    pub images: BTreeMap<ImageId, Image>,
    pub gt_scale: f64,
    pub depth_range: (f64, f64),
    pub seed: u64,
}

/// Margin between the configured depth bounds and the flat-ground extent.
const DEPTH_MARGIN: f64 = 1.15;
/// Undulation amplitude relative to camera height.
const RELIEF: f64 = 0.02;

/// Ground surface `y = height + amp · mean(sin(k·(x, z) + φ))`, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Terrain {
    height: f64,
    amp: f64,
    waves: [(f64, f64, f64); 3],
    grad_bound: f64,
    texture: [(f64, f64, f64); 2],
}

impl Terrain {
    fn new(height: f64, near: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut waves = [(0.0, 0.0, 0.0); 3];
        let mut grad_bound = 0.0;
        for w in &mut waves {
            let lambda = near * rng.random_range(4.0..10.0);
            let theta = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / lambda;
            *w = (k * libm::cos(theta), k * libm::sin(theta), rng.random_range(0.0..2.0 * PI));
            grad_bound += k / 3.0;
        }
        let mut texture = [(0.0, 0.0, 0.0); 2];
        for t in &mut texture {
            let lambda = near * rng.random_range(0.3..0.8);
            let theta = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / lambda;
            *t = (k * libm::cos(theta), k * libm::sin(theta), rng.random_range(0.0..2.0 * PI));
        }
        Self { height, amp: RELIEF * height, waves, grad_bound, texture }
    }

    fn surface_y(&self, x: f64, z: f64) -> f64 {
        let u: f64 = self.waves.iter().map(|&(kx, kz, p)| libm::sin(kx * x + kz * z + p)).sum::<f64>() / 3.0;
        self.height + self.amp * u
    }

    /// Surface texture in [0, 1], anchored to world coordinates.
    fn texture(&self, x: f64, z: f64) -> f64 {
        let s: f64 = self.texture.iter().map(|&(kx, kz, p)| libm::sin(kx * x + kz * z + p)).sum();
        0.5 + 0.25 * s
    }

    /// First intersection of `origin + t · dir` with the surface, `t > 0`.
    ///
    /// Marches with steps bounded by the Lipschitz constant of the signed
    /// height gap, then bisects the bracketing interval.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let gap = |t: f64| {
            let p = origin + dir * t;
            self.surface_y(p.x, p.z) - p.y
        };
        let lip = self.amp * self.grad_bound * libm::sqrt(dir.x * dir.x + dir.z * dir.z) + libm::fabs(dir.y);
        let min_step = 1e-4 * self.height;
        let (mut t0, mut g0) = (0.0, gap(0.0));
        if g0 <= 0.0 {
            return None;
        }
        let mut t1;
        loop {
            t1 = t0 + (g0 / lip).max(min_step);
            if t1 > t_max {
                return None;
            }
            let g1 = gap(t1);
            if g1 <= 0.0 {
                break;
            }
            t0 = t1;
            g0 = g1;
        }
        for _ in 0..80 {
            let mid = 0.5 * (t0 + t1);
            if gap(mid) > 0.0 {
                t0 = mid;
            } else {
                t1 = mid;
            }
        }
        Some(0.5 * (t0 + t1))
    }
}

fn validate_scene(config: &SceneConfig) -> Result<(), SynthError> {
    let (near, far) = config.depth_range;
    let k = &config.intrinsics;
    if config.n_images < 2 {
        return Err(SynthError::InvalidConfig("n_images must be at least 2"));
    }
    if config.n_points < 1 {
        return Err(SynthError::InvalidConfig("n_points must be at least 1"));
    }
    if !(near > 0.0 && far.is_finite() && far / near > DEPTH_MARGIN * DEPTH_MARGIN * 1.05) {
        return Err(SynthError::InvalidConfig("depth_range must satisfy 0 < near and far/near > 1.4"));
    }
    if k.width < 2 || k.height < 2 || !(k.fx > 0.0 && k.fy > 0.0) {
        return Err(SynthError::InvalidConfig("intrinsics need a positive focal length and at least 2x2 pixels"));
    }
    if !(config.gt_scale > 0.0 && config.gt_scale.is_finite()) {
        return Err(SynthError::InvalidConfig("gt_scale must be positive"));
    }
    Ok(())
}

/// Camera-to-world rotation for a camera pitched down by `pitch` and turned
/// by `yaw` about the vertical axis.
fn camera_rotation(pitch: f64, yaw: f64) -> Rotation3<f64> {
    let pitch_r = Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch);
    let yaw_r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    yaw_r * pitch_r
}

/// Viewing geometry that maps the image rows onto the depth range.
struct Rig {
    pitch: f64,
    height: f64,
}

fn rig_for(config: &SceneConfig) -> Rig {
    let k = &config.intrinsics;
    let (near, far) = config.depth_range;
    let b_top = k.cy / k.fy;
    let b_bottom = (k.height as f64 - 1.0 - k.cy) / k.fy;
    // flat-ground depth of row offset b is height / (sin α + b cos α)
    let ratio = (far / DEPTH_MARGIN) / (near * DEPTH_MARGIN);
    let tan_a = (ratio * b_top + b_bottom) / (ratio - 1.0);
    let pitch = libm::atan(tan_a);
    let height = near * DEPTH_MARGIN * (libm::sin(pitch) + b_bottom * libm::cos(pitch));
    Rig { pitch, height }
}

fn camera_poses(config: &SceneConfig, rig: &Rig) -> Vec<CameraPose> {
    let n = config.n_images;
    let (near, far) = config.depth_range;
    match config.camera_path {
        CameraPath::Forward => {
            let step = 0.1 * near;
            (0..n)
                .map(|j| CameraPose::new(camera_rotation(rig.pitch, 0.0), Vector3::new(0.0, 0.0, j as f64 * step)))
                .collect()
        }
        CameraPath::Orbit => {
            let radius = libm::sqrt(near * far);
            let pivot = Vector3::new(0.0, 0.0, radius);
            let max_yaw = 15.0f64.to_radians();
            (0..n)
                .map(|j| {
                    let yaw = -max_yaw + 2.0 * max_yaw * j as f64 / (n - 1) as f64;
                    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
                    let centre = pivot + r * (Vector3::zeros() - pivot);
                    CameraPose::new(camera_rotation(rig.pitch, yaw), centre)
                })
                .collect()
        }
    }
}

/// Camera-frame ray through a pixel, scaled so its z component is 1.
fn pixel_ray(k: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// Builds a scene whose cameras all share `config.intrinsics`.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    validate_scene(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.intrinsics.clone();
    let (near, far) = config.depth_range;
    let (w, h) = (k.width as usize, k.height as usize);
    let rig = rig_for(config);
    let terrain = Terrain::new(rig.height, near, &mut rng);
    let t_max = 4.0 * far;

    let mut recon = Reconstruction::new();
    recon.cameras.insert(k.camera_id, k.clone());
    let mut poses = Vec::with_capacity(config.n_images);
    for (j, pose) in camera_poses(config, &rig).into_iter().enumerate() {
        let image_id = j as ImageId + 1;
        let (q, t) = pose.to_world_to_camera();
        let image = PosedImage {
            image_id,
            camera_id: k.camera_id,
            name: format!("frame_{image_id:04}.png"),
            rotation: q,
            translation: t,
            observations: Vec::new(),
        };
        // use the pose as stored so every later depth matches extraction
        poses.push(image.pose());
        recon.images.insert(image_id, image);
    }

    let cast_camera = |pose: &CameraPose, ray_cam: &Vector3<f64>| terrain.cast(&pose.translation, &(pose.rotation * ray_cam), t_max);

    // Base depth and image rendering at pixel centres.
    let mut gt_maps: Vec<DepthMap> = Vec::with_capacity(poses.len());
    let mut images = BTreeMap::new();
    for (j, pose) in poses.iter().enumerate() {
        let mut depth = vec![0.0; w * h];
        let mut img = Tensor::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let ray = pixel_ray(&k, x as f64, y as f64);
                let t = cast_camera(pose, &ray).expect("camera rays look down onto the ground");
                let p = pose.translation + pose.rotation * ray * t;
                let fog = libm::exp(-2.0 * t / far);
                let tex = terrain.texture(p.x, p.z);
                let i = y * w + x;
                depth[i] = t;
                img.data[i] = fog;
                img.data[w * h + i] = tex;
                img.data[2 * w * h + i] = fog * tex;
            }
        }
        gt_maps.push(DepthMap::from_values(w, h, depth).expect("shape"));
        images.insert(j as ImageId + 1, img);
    }

    // Surface points through random pixels of random cameras.
    let mut candidates: Vec<Vector3<f64>> = Vec::with_capacity(config.n_points);
    for _ in 0..config.n_points {
        let pose = &poses[rng.random_range(0..poses.len())];
        let u = rng.random_range(0.0..(w - 1) as f64);
        let v = rng.random_range(0.0..(h - 1) as f64);
        let ray = pixel_ray(&k, u, v);
        if let Some(t) = cast_camera(pose, &ray) {
            candidates.push(pose.translation + pose.rotation * ray * t);
        }
    }

    // Visible projections: (point, image index, u, v, depth).
    let mut projections: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
    for (pi, p) in candidates.iter().enumerate() {
        for (j, pose) in poses.iter().enumerate() {
            let pc = pose.to_camera(p);
            let Ok((u, v)) = project_camera_point(&k, &pc) else { continue };
            if !(u >= 0.0 && v >= 0.0 && u < (w - 1) as f64 && v < (h - 1) as f64) {
                continue;
            }
            let Some(t_hit) = cast_camera(pose, &(pc / pc.z)) else { continue };
            if t_hit >= pc.z * (1.0 - 1e-6) {
                projections.push((pi, j, u, v, pc.z));
            }
        }
    }

    let footprint = |u: f64, v: f64| {
        let (x0, y0) = (libm::floor(u) as usize, libm::floor(v) as usize);
        [y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1]
    };
    // z-buffer over footprints: the nearest point owns a pixel
    let owners = |keep: &[bool]| {
        let mut owner: Vec<Vec<Option<(f64, usize)>>> = vec![vec![None; w * h]; poses.len()];
        for (n, &(_, j, u, v, d)) in projections.iter().enumerate() {
            if !keep[n] {
                continue;
            }
            for i in footprint(u, v) {
                let slot = &mut owner[j][i];
                if slot.is_none_or(|(od, on)| d < od || (d == od && n < on)) {
                    *slot = Some((d, n));
                }
            }
        }
        owner
    };
    let mut keep = vec![true; projections.len()];
    let owner = owners(&keep);
    for (n, &(_, j, u, v, _)) in projections.iter().enumerate() {
        keep[n] = footprint(u, v).iter().all(|&i| owner[j][i].map(|(_, on)| on) == Some(n));
    }
    let mut track_len = vec![0usize; candidates.len()];
    for (n, &(pi, ..)) in projections.iter().enumerate() {
        track_len[pi] += keep[n] as usize;
    }
    for (n, &(pi, ..)) in projections.iter().enumerate() {
        keep[n] = keep[n] && track_len[pi] >= 2;
    }

    // Splat surviving observations into the depth maps.
    let owner = owners(&keep);
    for (j, map) in gt_maps.iter_mut().enumerate() {
        for (i, slot) in owner[j].iter().enumerate() {
            if let Some((d, _)) = slot {
                map.set(i % w, i / w, *d);
            }
        }
    }

    // Assemble points and observations, ids in sampling order.
    let mut point_ids: BTreeMap<usize, PointId> = BTreeMap::new();
    for (n, &(pi, j, u, v, _)) in projections.iter().enumerate() {
        if !keep[n] {
            continue;
        }
        let next_id = point_ids.len() as PointId + 1;
        let pid = *point_ids.entry(pi).or_insert(next_id);
        let image_id = j as ImageId + 1;
        let image = recon.images.get_mut(&image_id).expect("image");
        let idx = image.observations.len() as u32;
        image.observations.push(Observation { x: u, y: v, point3d_id: Some(pid) });
        let p = candidates[pi];
        let point = recon.points.entry(pid).or_insert_with(|| {
            let c = (255.0 * terrain.texture(p.x, p.z)).clamp(0.0, 255.0) as u8;
            ScenePoint { point3d_id: pid, position: p, color: [c, c, c], reproj_error: 0.0, track: Vec::new() }
        });
        point.track.push(TrackEntry { image_id, point2d_idx: idx });
    }

    let gt_depth_maps = gt_maps.into_iter().enumerate().map(|(j, m)| (j as ImageId + 1, m)).collect();
    Ok(SyntheticScene {
        reconstruction: recon,
        gt_depth_maps,
        images,
        gt_scale: config.gt_scale,
        depth_range: config.depth_range,
        seed: config.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Relative SfM depth noise at the far bound; the std is
    /// `sfm_rel_sigma · d² / d_far`.
    pub sfm_rel_sigma: f64,
    /// Same law for the pseudo-network depths.
    pub nn_rel_sigma: f64,
    pub outlier_fraction: f64,
    /// Multiplicative range applied to the true depth of an outlier.
    pub outlier_range: (f64, f64),
    /// Std of the Gaussian whose magnitude becomes the reprojection error.
    pub reproj_noise_sigma: f64,
    /// Amplitude of the smooth multiplicative bias on network maps.
    pub bias_amplitude: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sfm_rel_sigma: 0.05,
            nn_rel_sigma: 0.05,
            outlier_fraction: 0.2,
            outlier_range: (1.5, 3.0),
            reproj_noise_sigma: 0.5,
            bias_amplitude: 0.3,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            sfm_rel_sigma: 0.0,
            nn_rel_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_range: (1.5, 3.0),
            reproj_noise_sigma: 0.0,
            bias_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sfm_rel_sigma >= 0.0 && self.nn_rel_sigma >= 0.0 && self.reproj_noise_sigma >= 0.0) {
            return Err(SynthError::InvalidConfig("noise sigmas must be non-negative"));
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(SynthError::InvalidConfig("outlier_fraction must lie in [0, 0.5)"));
        }
        let (lo, hi) = self.outlier_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(SynthError::InvalidConfig("outlier_range must be 0 < min < max"));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(SynthError::InvalidConfig("bias_amplitude must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Smooth multiplicative depth bias `1 + amplitude · mean(sin(k q + φ))`
/// over the normalized inverse depth `q ∈ [0, 1]` (0 at the far bound, 1
/// at the near bound), built from three random low-frequency waves.
///
/// The bias follows scene content rather than absolute pixel position, so a
/// network that sees the image can in principle learn to undo it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasField {
    pub amplitude: f64,
    waves: [(f64, f64); 3],
    range: (f64, f64),
}

impl BiasField {
    pub fn new<R: Rng>(amplitude: f64, depth_range: (f64, f64), rng: &mut R) -> Self {
        let mut waves = [(0.0, 0.0); 3];
        for wv in &mut waves {
            let cycles = rng.random_range(0.5..1.5);
            *wv = (2.0 * PI * cycles, rng.random_range(0.0..2.0 * PI));
        }
        Self { amplitude, waves, range: depth_range }
    }

    /// Factor applied to a ground-truth depth `d`.
    pub fn at(&self, d: f64) -> f64 {
        let (near, far) = self.range;
        let q = (1.0 / d - 1.0 / far) / (1.0 / near - 1.0 / far);
        let s: f64 = self.waves.iter().map(|&(k, p)| libm::sin(k * q + p)).sum();
        1.0 + self.amplitude * s / 3.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedScene {
    /// One frame per image, entries in the order of the image's tracked
    /// observations.
    pub frames: Vec<SparseDepthFrame>,
    /// Pseudo-network depth maps in network units.
    pub network_maps: BTreeMap<ImageId, DepthMap>,
    /// Per frame and entry: whether the SfM depth was replaced by an outlier.
    pub injected_outlier: Vec<Vec<bool>>,
    /// Per-point reprojection error shared by all of its entries.
    pub reproj_errors: BTreeMap<PointId, f64>,
    pub bias: BiasField,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

/// Relative standard deviation `sigma · d / d_far`.
#[inline]
fn rel_std(sigma: f64, d: f64, far: f64) -> f64 {
    sigma * d / far
}

/// Applies the noise model to a scene.
///
/// Network maps are `gt / gt_scale` with per-pixel heteroscedastic noise and
/// a smooth scene-level bias; the network depth of each sparse entry is the
/// bilinear sample of its map. SfM depths get their own heteroscedastic
/// noise and a seeded fraction is replaced by `U(outlier_range) · depth`.
pub fn corrupt(scene: &SyntheticScene, noise: &NoiseConfig, seed: u64) -> Result<CorruptedScene, SynthError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let far = scene.depth_range.1;
    let bias = BiasField::new(noise.bias_amplitude, scene.depth_range, &mut rng);
    let std_normal = normal(1.0);

    let mut network_maps = BTreeMap::new();
    for (&id, gt) in &scene.gt_depth_maps {
        let (w, h) = (gt.width(), gt.height());
        let mut m = gt.clone();
        for y in 0..h {
            for x in 0..w {
                let d = gt.get(x, y);
                let eps: f64 = std_normal.sample(&mut rng) * rel_std(noise.nn_rel_sigma, d, far);
                let factor = (1.0 + eps).max(0.05) * bias.at(d);
                m.set(x, y, d / scene.gt_scale * factor);
            }
        }
        network_maps.insert(id, m);
    }

    let mut reproj_errors = BTreeMap::new();
    for &pid in scene.reconstruction.points.keys() {
        let r: f64 = std_normal.sample(&mut rng) * noise.reproj_noise_sigma;
        reproj_errors.insert(pid, libm::fabs(r));
    }

    let recon = &scene.reconstruction;
    let mut frames = Vec::new();
    let mut injected_outlier = Vec::new();
    for (&id, image) in &recon.images {
        let pose = image.pose();
        let map = &network_maps[&id];
        let mut frame = SparseDepthFrame::new(id);
        let mut flags = Vec::new();
        for obs in &image.observations {
            let Some(pid) = obs.point3d_id else { continue };
            let point = &recon.points[&pid];
            let d = pose.to_camera(&point.position).z;
            let nn = map.sample(obs.x, obs.y).ok().flatten().expect("observation inside its map");
            let is_outlier = rng.random_bool(noise.outlier_fraction);
            let sfm = if is_outlier {
                d * rng.random_range(noise.outlier_range.0..noise.outlier_range.1)
            } else {
                let eps: f64 = std_normal.sample(&mut rng) * rel_std(noise.sfm_rel_sigma, d, far);
                d * (1.0 + eps).max(0.05)
            };
            frame.entries.push(SparseDepthEntry {
                point3d_id: pid,
                u: obs.x,
                v: obs.y,
                sfm_depth: sfm,
                nn_depth: nn,
                reproj_error: reproj_errors[&pid],
            });
            flags.push(is_outlier);
        }
        frames.push(frame);
        injected_outlier.push(flags);
    }
    Ok(CorruptedScene { frames, network_maps, injected_outlier, reproj_errors, bias })
}

/// Perturbs 3-D points radially about the centre of their first observing
/// camera, mirroring SfM depth noise, and assigns reprojection errors.
/// Returns the perturbed reconstruction and the ids of injected outliers.
pub fn perturb_reconstruction(
    recon: &Reconstruction,
    far: f64,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(Reconstruction, Vec<PointId>), SynthError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = normal(1.0);
    let mut out = recon.clone();
    let mut outliers = Vec::new();
    for (pid, point) in out.points.iter_mut() {
        let Some(first) = point.track.first() else { continue };
        let Some(image) = recon.images.get(&first.image_id) else { continue };
        let centre = image.pose().translation;
        let offset = point.position - centre;
        let d = offset.norm();
        let factor = if rng.random_bool(noise.outlier_fraction) {
            outliers.push(*pid);
            rng.random_range(noise.outlier_range.0..noise.outlier_range.1)
        } else {
            let eps: f64 = std_normal.sample(&mut rng) * rel_std(noise.sfm_rel_sigma, d, far);
            (1.0 + eps).max(0.05)
        };
        point.position = centre + offset * factor;
        let r: f64 = std_normal.sample(&mut rng) * noise.reproj_noise_sigma;
        point.reproj_error = libm::fabs(r);
    }
    Ok((out, outliers))
}

/// Dense pseudo-network maps without sparse extraction: `gt / gt_scale`
/// times heteroscedastic noise and the bias field, as in [`corrupt`].
pub fn network_maps(scene: &SyntheticScene, noise: &NoiseConfig, seed: u64) -> Result<BTreeMap<ImageId, DepthMap>, SynthError> {
    Ok(corrupt(scene, noise, seed)?.network_maps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTrialConfig {
    pub n_pairs: usize,
    /// Network depth is SfM depth divided by this factor, so the ideal
    /// alignment scale is its inverse.
    pub gt_scale: f64,
    /// Network-depth range; depths are drawn uniformly in inverse depth.
    pub depth_range: (f64, f64),
    pub noise: NoiseConfig,
}

impl Default for FrameTrialConfig {
    fn default() -> Self {
        Self { n_pairs: 200, gt_scale: 3.7, depth_range: (10.0, 80.0), noise: NoiseConfig::default() }
    }
}

/// A standalone sparse frame for alignment experiments, with the
/// injected-outlier flag of every entry.
pub fn generate_frame(config: &FrameTrialConfig, seed: u64) -> Result<(SparseDepthFrame, Vec<bool>), SynthError> {
    config.noise.validate()?;
    let (near, far) = config.depth_range;
    if !(near > 0.0 && near < far && far.is_finite()) || config.n_pairs == 0 || !(config.gt_scale > 0.0) {
        return Err(SynthError::InvalidConfig("frame trial needs pairs, 0 < near < far and a positive scale"));
    }
    let noise = &config.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = normal(1.0);
    let mut frame = SparseDepthFrame::new(0);
    let mut flags = Vec::with_capacity(config.n_pairs);
    for i in 0..config.n_pairs {
        let inv = rng.random_range(1.0 / far..1.0 / near);
        let d_nn = 1.0 / inv;
        let d_sfm = d_nn * config.gt_scale;
        let e_nn: f64 = std_normal.sample(&mut rng) * rel_std(noise.nn_rel_sigma, d_nn, far);
        let nn = d_nn * (1.0 + e_nn).max(0.05);
        let is_outlier = rng.random_bool(noise.outlier_fraction);
        let sfm = if is_outlier {
            d_sfm * rng.random_range(noise.outlier_range.0..noise.outlier_range.1)
        } else {
            let e: f64 = std_normal.sample(&mut rng) * rel_std(noise.sfm_rel_sigma, d_nn, far);
            d_sfm * (1.0 + e).max(0.05)
        };
        let r: f64 = std_normal.sample(&mut rng) * noise.reproj_noise_sigma;
        frame.entries.push(SparseDepthEntry {
            point3d_id: i as PointId,
            u: rng.random_range(0.0..1000.0),
            v: rng.random_range(0.0..300.0),
            sfm_depth: sfm,
            nn_depth: nn,
            reproj_error: libm::fabs(r),
        });
        flags.push(is_outlier);
    }
    Ok((frame, flags))
}

/// Pixels not touched by the bilinear footprint of any entry, i.e. pixels
/// that never receive direct supervision.
pub fn held_out_mask(frame: &SparseDepthFrame, width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![true; width * height];
    for e in &frame.entries {
        let (x0, y0) = (libm::floor(e.u) as usize, libm::floor(e.v) as usize);
        for (x, y) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
            if x < width && y < height {
                mask[y * width + x] = false;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{align_frame, AlignConfig};
    use crate::geometry::{extract_sparse_depths, point_depth, ExtractOptions};

    fn small(seed: u64, path: CameraPath) -> SyntheticScene {
        generate_scene(&SceneConfig { seed, camera_path: path, ..SceneConfig::default() }).unwrap()
    }

    #[test]
    fn deterministic_for_a_seed() {
        assert_eq!(small(3, CameraPath::Forward), small(3, CameraPath::Forward));
        assert_ne!(small(3, CameraPath::Forward).reconstruction, small(4, CameraPath::Forward).reconstruction);
    }

    #[test]
    fn reconstruction_is_consistent_with_tracks_of_two() {
        for path in [CameraPath::Forward, CameraPath::Orbit] {
            let s = small(1, path);
            let r = &s.reconstruction;
            assert!(r.validate().is_ok(), "{:?}", r.integrity_errors());
            assert!(r.points.len() > 150, "{path:?}: only {} points", r.points.len());
            assert!(r.points.values().all(|p| p.track.len() >= 2 && p.reproj_error == 0.0));
        }
    }

    #[test]
    fn observations_reproject_exactly_and_match_rendered_depth() {
        for path in [CameraPath::Forward, CameraPath::Orbit] {
            let s = small(2, path);
            let r = &s.reconstruction;
            let cam = &r.cameras[&1];
            for image in r.images.values() {
                let pose = image.pose();
                let map = &s.gt_depth_maps[&image.image_id];
                for obs in &image.observations {
                    let p = &r.points[&obs.point3d_id.unwrap()];
                    let (u, v) = crate::geometry::project(cam, &pose, &p.position).unwrap();
                    assert!((u - obs.x).abs() < 1e-9 && (v - obs.y).abs() < 1e-9);
                    let d = point_depth(&pose, &p.position);
                    let rendered = map.sample(u, v).unwrap().unwrap();
                    assert!((rendered - d).abs() < 1e-6, "{rendered} vs {d}");
                }
            }
        }
    }

    #[test]
    fn depths_stay_in_range() {
        for path in [CameraPath::Forward, CameraPath::Orbit] {
            let s = small(5, path);
            let (near, far) = s.depth_range;
            for m in s.gt_depth_maps.values() {
                assert!(m.values().iter().all(|&d| d >= near && d <= far));
            }
        }
    }

    #[test]
    fn images_have_three_channels_in_unit_range() {
        let s = small(0, CameraPath::Forward);
        for img in s.images.values() {
            assert_eq!((img.channels, img.height, img.width), (3, 64, 64));
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_noise_corruption_only_divides_by_gt_scale() {
        let s = small(6, CameraPath::Forward);
        let c = corrupt(&s, &NoiseConfig::zero(), 1).unwrap();
        for (id, m) in &c.network_maps {
            let gt = &s.gt_depth_maps[id];
            for (a, b) in m.values().iter().zip(gt.values()) {
                assert!((a * s.gt_scale - b).abs() <= 1e-12 * b);
            }
        }
        for f in &c.frames {
            for e in &f.entries {
                assert!((e.nn_depth * s.gt_scale - e.sfm_depth).abs() <= 1e-9 * e.sfm_depth);
                assert_eq!(e.reproj_error, 0.0);
            }
            let a = align_frame(f, &AlignConfig::default()).unwrap();
            assert!((a.scale * s.gt_scale - 1.0).abs() < 1e-12);
            assert_eq!(a.stage2_inliers.len(), f.entries.len());
        }
    }

    #[test]
    fn extraction_from_gt_maps_recovers_exact_depths() {
        let s = small(8, CameraPath::Orbit);
        for (&id, map) in &s.gt_depth_maps {
            let f = extract_sparse_depths(&s.reconstruction, id, map, ExtractOptions::default()).unwrap();
            assert_eq!(f.entries.len(), s.reconstruction.images[&id].observations.len());
            for e in &f.entries {
                assert!((e.sfm_depth - e.nn_depth).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noise_std_grows_linearly_in_relative_terms() {
        // d_far = 2 d_mid: relative std in the deepest decile is twice the
        // mid-depth one
        let cfg = FrameTrialConfig {
            n_pairs: 200_000,
            gt_scale: 1.0,
            depth_range: (0.2, 2.0),
            noise: NoiseConfig { outlier_fraction: 0.0, nn_rel_sigma: 0.0, ..NoiseConfig::default() },
        };
        let (f, _) = generate_frame(&cfg, 3).unwrap();
        let rel_std_in = |lo: f64, hi: f64| {
            let r: Vec<f64> = f
                .entries
                .iter()
                .filter(|e| e.nn_depth >= lo && e.nn_depth < hi)
                .map(|e| e.sfm_depth / e.nn_depth - 1.0)
                .collect();
            let m = r.iter().sum::<f64>() / r.len() as f64;
            libm::sqrt(r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r.len() - 1) as f64)
        };
        let ratio = rel_std_in(1.9, 2.0) / rel_std_in(0.95, 1.05);
        assert!((ratio - 1.95 / 1.0).abs() < 0.08, "{ratio}");
    }

    #[test]
    fn outlier_count_is_binomial() {
        let cfg = FrameTrialConfig { n_pairs: 1000, ..FrameTrialConfig::default() };
        let (_, flags) = generate_frame(&cfg, 11).unwrap();
        let n = flags.iter().filter(|&&f| f).count() as f64;
        // 4 standard deviations of Binomial(1000, 0.2)
        assert!((n - 200.0).abs() <= 4.0 * (1000.0f64 * 0.2 * 0.8).sqrt(), "{n}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_scene(&SceneConfig { n_images: 1, ..SceneConfig::default() }).is_err());
        assert!(generate_scene(&SceneConfig { n_points: 0, ..SceneConfig::default() }).is_err());
        assert!(generate_scene(&SceneConfig { depth_range: (5.0, 5.5), ..SceneConfig::default() }).is_err());
        let s = small(0, CameraPath::Forward);
        let bad = NoiseConfig { outlier_fraction: 0.6, ..NoiseConfig::default() };
        assert!(corrupt(&s, &bad, 0).is_err());
    }

    #[test]
    fn perturbation_keeps_integrity_and_flags_outliers() {
        let s = small(9, CameraPath::Forward);
        let (p, outliers) = perturb_reconstruction(&s.reconstruction, 40.0, &NoiseConfig::default(), 2).unwrap();
        assert!(p.validate().is_ok());
        let frac = outliers.len() as f64 / p.points.len() as f64;
        assert!(frac > 0.08 && frac < 0.32, "{frac}");
        assert!(p.points.values().all(|pt| pt.reproj_error >= 0.0));
    }

    #[test]
    fn held_out_mask_excludes_footprints() {
        let mut f = SparseDepthFrame::new(0);
        f.entries.push(SparseDepthEntry { point3d_id: 0, u: 1.5, v: 2.25, sfm_depth: 1.0, nn_depth: 1.0, reproj_error: 0.0 });
        let m = held_out_mask(&f, 4, 4);
        assert_eq!(m.iter().filter(|&&x| !x).count(), 4);
        assert!(!m[2 * 4 + 1] && !m[3 * 4 + 2]);
    }
}

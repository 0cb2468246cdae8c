//! In-memory sparse reconstruction: cameras, posed images with their 2-D
//! observations, and triangulated points with feature tracks.
//!
//! Poses are stored the way COLMAP stores them (world-to-camera quaternion and
//! translation). Use [`PosedImage::pose`] to get the camera-to-world form used
//! by the depth extraction code.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::CameraPose;

pub type CameraId = u32;
pub type ImageId = u32;
pub type PointId = u64;

/// Pinhole camera models understood by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    /// COLMAP's numeric model id.
    pub fn id(self) -> i32 {
        match self {
            CameraModel::SimplePinhole => 0,
            CameraModel::Pinhole => 1,
        }
    }

    pub fn from_id(id: i32) -> Option<Self> {
        match id {
            0 => Some(CameraModel::SimplePinhole),
            1 => Some(CameraModel::Pinhole),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "SIMPLE_PINHOLE" => Some(CameraModel::SimplePinhole),
            "PINHOLE" => Some(CameraModel::Pinhole),
            _ => None,
        }
    }

    pub fn num_params(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
        }
    }
}

impl fmt::Display for CameraModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub camera_id: CameraId,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// A pinhole camera; the model is `SimplePinhole` when `fx == fy`.
    pub fn new(camera_id: CameraId, width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        let model = if fx == fy { CameraModel::SimplePinhole } else { CameraModel::Pinhole };
        Self { camera_id, model, width, height, fx, fy, cx, cy }
    }

    /// Parameters in COLMAP order for the stored model.
    pub fn params(&self) -> Vec<f64> {
        match self.model {
            CameraModel::SimplePinhole => alloc::vec![self.fx, self.cx, self.cy],
            CameraModel::Pinhole => alloc::vec![self.fx, self.fy, self.cx, self.cy],
        }
    }

    /// Builds intrinsics from a COLMAP parameter list.
    ///
    /// Returns `None` when the parameter count does not match the model.
    pub fn from_params(camera_id: CameraId, model: CameraModel, width: u32, height: u32, params: &[f64]) -> Option<Self> {
        if params.len() != model.num_params() {
            return None;
        }
        let (fx, fy, cx, cy) = match model {
            CameraModel::SimplePinhole => (params[0], params[0], params[1], params[2]),
            CameraModel::Pinhole => (params[0], params[1], params[2], params[3]),
        };
        Some(Self { camera_id, model, width, height, fx, fy, cx, cy })
    }

    /// True when the pixel lies inside `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// A 2-D feature of an image, optionally associated with a 3-D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    pub point3d_id: Option<PointId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub image_id: ImageId,
    pub camera_id: CameraId,
    pub name: String,
    /// World-to-camera rotation (qw, qx, qy, qz), unit norm.
    pub rotation: UnitQuaternion<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub observations: Vec<Observation>,
}

impl PosedImage {
    /// Camera-to-world pose of this image.
    pub fn pose(&self) -> CameraPose {
        CameraPose::from_world_to_camera(&self.rotation, &self.translation)
    }

    /// Quaternion components in COLMAP order (qw, qx, qy, qz).
    pub fn qvec(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// Quaternion norms further than this from 1 are treated as corruption.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

/// Normalizes a (qw, qx, qy, qz) quaternion, refusing ones that are clearly
/// not rotations. Returns the offending norm on failure.
pub fn normalize_qvec(q: [f64; 4]) -> Result<UnitQuaternion<f64>, f64> {
    let norm = libm::sqrt(q.iter().map(|c| c * c).sum::<f64>());
    if !norm.is_finite() || libm::fabs(norm - 1.0) > QUATERNION_NORM_TOLERANCE {
        return Err(norm);
    }
    Ok(UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrackEntry {
    pub image_id: ImageId,
    pub point2d_idx: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub point3d_id: PointId,
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    /// COLMAP-reported reprojection error for the point, in pixels.
    pub reproj_error: f64,
    pub track: Vec<TrackEntry>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrityError {
    #[error("image {image_id} references unknown camera {camera_id}")]
    UnknownCamera { image_id: ImageId, camera_id: CameraId },
    #[error("image {image_id} observation {index} references unknown point {point3d_id}")]
    DanglingObservation { image_id: ImageId, index: usize, point3d_id: PointId },
    #[error("point {point3d_id} track references unknown image {image_id}")]
    UnknownTrackImage { point3d_id: PointId, image_id: ImageId },
    #[error("point {point3d_id} track references observation {point2d_idx} of image {image_id}, which does not exist")]
    MissingObservation { point3d_id: PointId, image_id: ImageId, point2d_idx: u32 },
    #[error("point {point3d_id} track entry (image {image_id}, observation {point2d_idx}) points at an observation of a different point")]
    TrackMismatch { point3d_id: PointId, image_id: ImageId, point2d_idx: u32 },
    #[error("image {image_id} observation {index} claims point {point3d_id}, but the point's track does not list it")]
    MissingTrackEntry { image_id: ImageId, index: usize, point3d_id: PointId },
    #[error("point {point3d_id} has a track of length {len}; at least 2 are required")]
    ShortTrack { point3d_id: PointId, len: usize },
    #[error("point {point3d_id} has invalid reprojection error {error}")]
    BadReprojectionError { point3d_id: PointId, error: f64 },
    #[error("camera {camera_id} has invalid intrinsics: {reason}")]
    BadIntrinsics { camera_id: CameraId, reason: &'static str },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reconstruction {
    pub cameras: BTreeMap<CameraId, CameraIntrinsics>,
    pub images: BTreeMap<ImageId, PosedImage>,
    pub points: BTreeMap<PointId, ScenePoint>,
}

impl Reconstruction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn camera_of(&self, image: &PosedImage) -> Option<&CameraIntrinsics> {
        self.cameras.get(&image.camera_id)
    }

    /// Checks referential integrity in both directions and returns every
    /// violation found (empty when the reconstruction is consistent).
    pub fn integrity_errors(&self) -> Vec<IntegrityError> {
        let mut errors = Vec::new();
        for cam in self.cameras.values() {
            if cam.width == 0 || cam.height == 0 {
                errors.push(IntegrityError::BadIntrinsics { camera_id: cam.camera_id, reason: "zero image size" });
            }
            if !(cam.fx > 0.0 && cam.fy > 0.0) {
                errors.push(IntegrityError::BadIntrinsics { camera_id: cam.camera_id, reason: "non-positive focal length" });
            }
        }
        for image in self.images.values() {
            if !self.cameras.contains_key(&image.camera_id) {
                errors.push(IntegrityError::UnknownCamera { image_id: image.image_id, camera_id: image.camera_id });
            }
            for (index, obs) in image.observations.iter().enumerate() {
                let Some(pid) = obs.point3d_id else { continue };
                match self.points.get(&pid) {
                    None => errors.push(IntegrityError::DanglingObservation { image_id: image.image_id, index, point3d_id: pid }),
                    Some(point) => {
                        let listed = point
                            .track
                            .iter()
                            .any(|t| t.image_id == image.image_id && t.point2d_idx as usize == index);
                        if !listed {
                            errors.push(IntegrityError::MissingTrackEntry { image_id: image.image_id, index, point3d_id: pid });
                        }
                    }
                }
            }
        }
        for point in self.points.values() {
            let pid = point.point3d_id;
            if !(point.reproj_error >= 0.0) {
                errors.push(IntegrityError::BadReprojectionError { point3d_id: pid, error: point.reproj_error });
            }
            if point.track.len() < 2 {
                errors.push(IntegrityError::ShortTrack { point3d_id: pid, len: point.track.len() });
            }
            for t in &point.track {
                let Some(image) = self.images.get(&t.image_id) else {
                    errors.push(IntegrityError::UnknownTrackImage { point3d_id: pid, image_id: t.image_id });
                    continue;
                };
                match image.observations.get(t.point2d_idx as usize) {
                    None => errors.push(IntegrityError::MissingObservation {
                        point3d_id: pid,
                        image_id: t.image_id,
                        point2d_idx: t.point2d_idx,
                    }),
                    Some(obs) if obs.point3d_id != Some(pid) => errors.push(IntegrityError::TrackMismatch {
                        point3d_id: pid,
                        image_id: t.image_id,
                        point2d_idx: t.point2d_idx,
                    }),
                    Some(_) => {}
                }
            }
        }
        errors
    }

    /// First integrity violation, if any.
    pub fn validate(&self) -> Result<(), IntegrityError> {
        match self.integrity_errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Points observed by an image, through the point tracks, together with
    /// the index of the observing 2-D feature.
    pub fn observed_points(&self, image_id: ImageId) -> Vec<(&ScenePoint, u32)> {
        self.points
            .values()
            .flat_map(|p| {
                p.track
                    .iter()
                    .filter(move |t| t.image_id == image_id)
                    .map(move |t| (p, t.point2d_idx))
            })
            .collect()
    }

    /// Applies a similarity-free rigid motion `X -> R X + t` to every point
    /// and camera, keeping all projections and depths unchanged.
    pub fn transform_rigid(&mut self, rotation: &UnitQuaternion<f64>, translation: &Vector3<f64>) {
        for p in self.points.values_mut() {
            p.position = rotation * p.position + translation;
        }
        for image in self.images.values_mut() {
            // x_c = R_wc X + t_wc with X = R^T (X' - t)
            let r_new = image.rotation * rotation.inverse();
            let t_new = image.translation - r_new * translation;
            image.rotation = r_new;
            image.translation = t_new;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_view() -> Reconstruction {
        let mut r = Reconstruction::new();
        r.cameras.insert(1, CameraIntrinsics::new(1, 64, 48, 50.0, 50.0, 32.0, 24.0));
        for id in 1..=2u32 {
            r.images.insert(
                id,
                PosedImage {
                    image_id: id,
                    camera_id: 1,
                    name: alloc::format!("{id}.png"),
                    rotation: UnitQuaternion::identity(),
                    translation: Vector3::new(-(id as f64), 0.0, 0.0),
                    observations: vec![Observation { x: 10.0, y: 10.0, point3d_id: Some(7) }],
                },
            );
        }
        r.points.insert(
            7,
            ScenePoint {
                point3d_id: 7,
                position: Vector3::new(0.0, 0.0, 5.0),
                color: [1, 2, 3],
                reproj_error: 0.0,
                track: vec![TrackEntry { image_id: 1, point2d_idx: 0 }, TrackEntry { image_id: 2, point2d_idx: 0 }],
            },
        );
        r
    }

    #[test]
    fn consistent_model_validates() {
        assert!(two_view().validate().is_ok());
    }

    #[test]
    fn unknown_camera_is_reported() {
        let mut r = two_view();
        r.images.get_mut(&2).unwrap().camera_id = 9;
        assert_eq!(r.validate(), Err(IntegrityError::UnknownCamera { image_id: 2, camera_id: 9 }));
    }

    #[test]
    fn track_observation_mismatch_is_reported() {
        let mut r = two_view();
        r.images.get_mut(&2).unwrap().observations[0].point3d_id = None;
        let errs = r.integrity_errors();
        assert!(errs.iter().any(|e| matches!(e, IntegrityError::TrackMismatch { point3d_id: 7, image_id: 2, .. })));
    }

    #[test]
    fn short_track_is_reported() {
        let mut r = two_view();
        r.points.get_mut(&7).unwrap().track.pop();
        r.images.get_mut(&2).unwrap().observations[0].point3d_id = None;
        assert_eq!(r.integrity_errors(), vec![IntegrityError::ShortTrack { point3d_id: 7, len: 1 }]);
    }

    #[test]
    #[allow(clippy::approx_constant)] // rounded as a text model stores it
    fn quaternion_tolerance() {
        assert!(normalize_qvec([1.0005, 0.0, 0.0, 0.0]).is_ok());
        assert!(normalize_qvec([1.01, 0.0, 0.0, 0.0]).is_err());
        let q = normalize_qvec([0.70710678, 0.0, 0.70710678, 0.0]).unwrap();
        assert!((q.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simple_pinhole_only_when_focal_lengths_match() {
        assert_eq!(CameraIntrinsics::new(1, 10, 10, 5.0, 5.0, 4.0, 4.0).model, CameraModel::SimplePinhole);
        assert_eq!(CameraIntrinsics::new(1, 10, 10, 5.0, 6.0, 4.0, 4.0).model, CameraModel::Pinhole);
    }
}

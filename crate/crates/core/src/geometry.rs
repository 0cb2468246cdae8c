//! Rigid camera poses, pinhole projection, and extraction of sparse
//! (SfM depth, network depth) correspondences for one registered image.

use alloc::vec::Vec;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::depth_map::DepthMap;
use crate::recon::{CameraIntrinsics, ImageId, PointId, Reconstruction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("image {0} is not registered in the reconstruction")]
    UnregisteredImage(ImageId),
    #[error("image {image_id} has no camera {camera_id}")]
    MissingCamera { image_id: ImageId, camera_id: u32 },
    #[error("depth map is {map_width}x{map_height} but camera is {width}x{height}")]
    ResolutionMismatch { map_width: usize, map_height: usize, width: u32, height: u32 },
}

/// Camera-to-world rigid transform: `rotation` maps camera axes into the
/// world frame and `translation` is the camera centre in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    /// Converts COLMAP's world-to-camera storage (`x_c = R_wc X + t_wc`) into
    /// the camera-to-world pose: `R = R_wcᵀ`, `t = -R_wcᵀ t_wc`.
    pub fn from_world_to_camera(rotation: &UnitQuaternion<f64>, translation: &Vector3<f64>) -> Self {
        let r_wc = rotation.to_rotation_matrix();
        let r = r_wc.inverse();
        Self::new(r, -(r * translation))
    }

    /// The world-to-camera quaternion and translation for COLMAP storage.
    pub fn to_world_to_camera(&self) -> (UnitQuaternion<f64>, Vector3<f64>) {
        let r_wc = self.rotation.inverse();
        (UnitQuaternion::from_rotation_matrix(&r_wc), -(r_wc * self.translation))
    }

    /// Point expressed in the camera frame, `Rᵀ (X - t)`.
    #[inline]
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(point - self.translation))
    }

    /// Camera-frame point mapped back to world coordinates.
    #[inline]
    pub fn to_world(&self, point_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point_cam + self.translation
    }

    /// Left-multiplies the pose by a rigid world motion `X -> R X + t`.
    pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        Self::new(rotation * self.rotation, rotation * self.translation + translation)
    }
}

/// Optical-axis coordinate of a world point in the camera frame. Negative
/// values mean the point is behind the camera.
#[inline]
pub fn point_depth(pose: &CameraPose, point: &Vector3<f64>) -> f64 {
    pose.to_camera(point).z
}

/// Pinhole projection of a world point to subpixel coordinates `(u, v)`.
pub fn project(intrinsics: &CameraIntrinsics, pose: &CameraPose, point: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    let pc = pose.to_camera(point);
    project_camera_point(intrinsics, &pc)
}

/// Projection of a point already expressed in the camera frame.
pub fn project_camera_point(intrinsics: &CameraIntrinsics, pc: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    if !(pc.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: pc.z });
    }
    Ok((intrinsics.fx * pc.x / pc.z + intrinsics.cx, intrinsics.fy * pc.y / pc.z + intrinsics.cy))
}

/// World point seen at pixel `(u, v)` with optical-axis depth `depth`.
pub fn unproject(intrinsics: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64, depth: f64) -> Vector3<f64> {
    pose.to_world(&unproject_to_camera(intrinsics, u, v, depth))
}

/// Camera-frame point seen at pixel `(u, v)` with optical-axis depth `depth`.
pub fn unproject_to_camera(intrinsics: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Vector3<f64> {
    Vector3::new((u - intrinsics.cx) / intrinsics.fx * depth, (v - intrinsics.cy) / intrinsics.fy * depth, depth)
}

/// One sparse correspondence between an SfM point and the network depth
/// at its projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseDepthEntry {
    pub point3d_id: PointId,
    pub u: f64,
    pub v: f64,
    pub sfm_depth: f64,
    pub nn_depth: f64,
    pub reproj_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDepthFrame {
    pub image_id: ImageId,
    pub entries: Vec<SparseDepthEntry>,
}

impl SparseDepthFrame {
    pub fn new(image_id: ImageId) -> Self {
        Self { image_id, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Why observed points were dropped during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtractionStats {
    pub observed: usize,
    pub behind_camera: usize,
    pub out_of_bounds: usize,
    pub invalid_depth: usize,
    pub non_positive_depth: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Bilinearly resize depth maps whose resolution differs from the camera.
    pub rescale: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { rescale: true }
    }
}

/// Collects sparse depth pairs for `image_id`.
///
/// Every point whose track contains the image is transformed into the camera,
/// projected, and paired with the bilinear network depth at that pixel.
/// Points behind the camera, outside the image, on invalid depth pixels, or
/// with non-positive depth are dropped and counted in the returned stats.
pub fn extract_sparse_depths_with_stats(
    recon: &Reconstruction,
    image_id: ImageId,
    depth_map: &DepthMap,
    options: ExtractOptions,
) -> Result<(SparseDepthFrame, ExtractionStats), GeometryError> {
    let image = recon.images.get(&image_id).ok_or(GeometryError::UnregisteredImage(image_id))?;
    let camera = recon
        .camera_of(image)
        .ok_or(GeometryError::MissingCamera { image_id, camera_id: image.camera_id })?;

    let (w, h) = (camera.width as usize, camera.height as usize);
    let resized;
    let map = if depth_map.width() == w && depth_map.height() == h {
        depth_map
    } else if options.rescale {
        resized = depth_map.resized(w, h);
        &resized
    } else {
        return Err(GeometryError::ResolutionMismatch {
            map_width: depth_map.width(),
            map_height: depth_map.height(),
            width: camera.width,
            height: camera.height,
        });
    };

    let pose = image.pose();
    let mut stats = ExtractionStats::default();
    let mut frame = SparseDepthFrame::new(image_id);
    for (point, _) in recon.observed_points(image_id) {
        stats.observed += 1;
        let pc = pose.to_camera(&point.position);
        let Ok((u, v)) = project_camera_point(camera, &pc) else {
            stats.behind_camera += 1;
            continue;
        };
        let Ok(sample) = map.sample(u, v) else {
            stats.out_of_bounds += 1;
            continue;
        };
        let Some(nn_depth) = sample else {
            stats.invalid_depth += 1;
            continue;
        };
        if !(nn_depth > 0.0) || !nn_depth.is_finite() {
            stats.non_positive_depth += 1;
            continue;
        }
        frame.entries.push(SparseDepthEntry {
            point3d_id: point.point3d_id,
            u,
            v,
            sfm_depth: pc.z,
            nn_depth,
            reproj_error: point.reproj_error,
        });
    }
    stats.kept = frame.entries.len();
    Ok((frame, stats))
}

pub fn extract_sparse_depths(
    recon: &Reconstruction,
    image_id: ImageId,
    depth_map: &DepthMap,
    options: ExtractOptions,
) -> Result<SparseDepthFrame, GeometryError> {
    extract_sparse_depths_with_stats(recon, image_id, depth_map, options).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::{Observation, PosedImage, ScenePoint, TrackEntry};
    use alloc::string::String;
    use alloc::vec;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(1, 100, 100, 100.0, 100.0, 50.0, 50.0)
    }

    #[test]
    fn identity_pose_depth() {
        assert_eq!(point_depth(&CameraPose::identity(), &Vector3::new(0.0, 0.0, 5.0)), 5.0);
        assert_eq!(point_depth(&CameraPose::identity(), &Vector3::new(0.0, 0.0, -1.0)), -1.0);
    }

    #[test]
    fn half_turn_about_y() {
        // R = diag(-1, 1, -1), camera centre at z = 10 looking back at the origin
        let pose = CameraPose::new(Rotation3::from_axis_angle(&Vector3::y_axis(), PI), Vector3::new(0.0, 0.0, 10.0));
        assert_relative_eq!(point_depth(&pose, &Vector3::new(0.0, 0.0, 5.0)), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_examples() {
        let k = intr();
        let id = CameraPose::identity();
        assert_eq!(project(&k, &id, &Vector3::new(0.0, 0.0, 3.0)).unwrap(), (50.0, 50.0));
        assert_eq!(project(&k, &id, &Vector3::new(1.0, 0.0, 10.0)).unwrap(), (60.0, 50.0));
        assert!(matches!(project(&k, &id, &Vector3::new(0.0, 0.0, -2.0)), Err(GeometryError::BehindCamera { .. })));
    }

    #[test]
    fn identity_quaternion_is_identity_pose() {
        let pose = CameraPose::from_world_to_camera(&UnitQuaternion::identity(), &Vector3::zeros());
        assert_eq!(pose, CameraPose::identity());
    }

    #[test]
    #[allow(clippy::approx_constant)] // rounded as a text model stores it
    fn quarter_turn_quaternion_about_y() {
        let q = crate::recon::normalize_qvec([0.70710678, 0.0, 0.70710678, 0.0]).unwrap();
        let r = q.to_rotation_matrix();
        // x axis maps to -z, z axis maps to +x
        assert_relative_eq!(r * Vector3::x(), -Vector3::z(), epsilon = 1e-8);
        assert_relative_eq!(r * Vector3::z(), Vector3::x(), epsilon = 1e-8);
    }

    fn single_image(points: &[(PointId, Vector3<f64>)], depth: f64) -> (Reconstruction, DepthMap) {
        let mut r = Reconstruction::new();
        r.cameras.insert(1, intr());
        let mut obs = Vec::new();
        for (i, (pid, x)) in points.iter().enumerate() {
            obs.push(Observation { x: 0.0, y: 0.0, point3d_id: Some(*pid) });
            r.points.insert(
                *pid,
                ScenePoint {
                    point3d_id: *pid,
                    position: *x,
                    color: [0; 3],
                    reproj_error: 0.25,
                    track: vec![TrackEntry { image_id: 1, point2d_idx: i as u32 }],
                },
            );
        }
        r.images.insert(
            1,
            PosedImage {
                image_id: 1,
                camera_id: 1,
                name: String::from("a.png"),
                rotation: UnitQuaternion::identity(),
                translation: Vector3::zeros(),
                observations: obs,
            },
        );
        (r, DepthMap::filled(100, 100, depth))
    }

    #[test]
    fn extraction_filters_and_counts() {
        let (r, map) = single_image(
            &[
                (1, Vector3::new(0.0, 0.0, 4.0)),
                (2, Vector3::new(0.0, 0.0, -4.0)),
                // u = width + 3
                (3, Vector3::new(0.53, 0.0, 1.0)),
                (4, Vector3::new(0.1, 0.1, 2.0)),
            ],
            7.0,
        );
        let (frame, stats) = extract_sparse_depths_with_stats(&r, 1, &map, ExtractOptions::default()).unwrap();
        assert_eq!(frame.len(), 2);
        assert_eq!(stats.behind_camera, 1);
        assert_eq!(stats.out_of_bounds, 1);
        assert!(frame.entries.iter().all(|e| e.nn_depth == 7.0 && e.sfm_depth > 0.0 && e.reproj_error == 0.25));
    }

    #[test]
    fn image_without_points_gives_empty_frame() {
        let (r, map) = single_image(&[], 1.0);
        assert!(extract_sparse_depths(&r, 1, &map, ExtractOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn unregistered_image_and_resolution_mismatch() {
        let (r, _) = single_image(&[(1, Vector3::new(0.0, 0.0, 4.0))], 1.0);
        let small = DepthMap::filled(50, 50, 2.0);
        assert_eq!(
            extract_sparse_depths(&r, 9, &small, ExtractOptions::default()),
            Err(GeometryError::UnregisteredImage(9))
        );
        assert!(matches!(
            extract_sparse_depths(&r, 1, &small, ExtractOptions { rescale: false }),
            Err(GeometryError::ResolutionMismatch { .. })
        ));
        let f = extract_sparse_depths(&r, 1, &small, ExtractOptions { rescale: true }).unwrap();
        assert_eq!(f.entries[0].nn_depth, 2.0);
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (-PI..PI, -1.5..1.5f64, -PI..PI, prop::array::uniform3(-5.0..5.0f64)).prop_map(|(roll, pitch, yaw, t)| {
            CameraPose::new(Rotation3::from_euler_angles(roll, pitch, yaw), Vector3::from(t))
        })
    }

    proptest! {
        #[test]
        fn unproject_then_project_round_trips(pose in arb_pose(), u in 0.0..99.0f64, v in 0.0..99.0f64, d in 0.1..100.0f64) {
            let k = CameraIntrinsics::new(1, 100, 100, 80.0, 90.0, 47.0, 52.0);
            let x = unproject(&k, &pose, u, v, d);
            let (pu, pv) = project(&k, &pose, &x).unwrap();
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
            prop_assert!((point_depth(&pose, &x) - d).abs() < 1e-9 * d.max(1.0));
        }

        #[test]
        fn rigid_motion_preserves_depth_and_pixels(pose in arb_pose(), motion in arb_pose(), x in prop::array::uniform3(-10.0..10.0f64)) {
            let k = intr();
            let x = Vector3::from(x);
            let moved_pose = pose.transformed(&motion.rotation, &motion.translation);
            let moved_x = motion.rotation * x + motion.translation;
            let d0 = point_depth(&pose, &x);
            let d1 = point_depth(&moved_pose, &moved_x);
            prop_assert!((d0 - d1).abs() < 1e-9);
            if d0 > 1e-3 {
                let (u0, v0) = project(&k, &pose, &x).unwrap();
                let (u1, v1) = project(&k, &moved_pose, &moved_x).unwrap();
                prop_assert!((u0 - u1).abs() < 1e-9 * (1.0 + u0.abs()) && (v0 - v1).abs() < 1e-9 * (1.0 + v0.abs()));
            }
        }

        #[test]
        fn pose_storage_round_trip(pose in arb_pose()) {
            let (q, t) = pose.to_world_to_camera();
            let back = CameraPose::from_world_to_camera(&q, &t);
            prop_assert!((back.rotation.matrix() - pose.rotation.matrix()).norm() < 1e-9);
            prop_assert!((back.translation - pose.translation).norm() < 1e-9);
            let r = back.rotation.matrix();
            prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }
}

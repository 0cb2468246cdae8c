//! Scale-aligned sparse supervision from a structure-from-motion
//! reconstruction for test-time refinement of monocular depth networks.
//!
//! Everything here is `no_std` + `alloc`. File formats, IO and the command
//! line live in the `sfm-ttr` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric kernels walk several parallel buffers by index.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod adam;
pub mod alignment;
pub mod depth_map;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod recon;
pub mod refine;
pub mod stats;
pub mod synth;

pub use alignment::{align_frame, align_frame_median, AlignConfig, AlignmentError, ScaleAlignment};
pub use depth_map::DepthMap;
pub use geometry::{extract_sparse_depths, CameraPose, SparseDepthEntry, SparseDepthFrame};
pub use metrics::{compute_metrics, DepthMetrics, EvalConfig};
pub use model::{DepthModel, ReferenceModel, RefineMode};
pub use recon::{CameraIntrinsics, PosedImage, Reconstruction, ScenePoint};
pub use refine::{refine, TtrConfig};

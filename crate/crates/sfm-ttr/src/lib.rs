//! File formats, COLMAP model I/O and the command-line front-end around
//! [`sfm_ttr_core`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod colmap;
pub mod config;
pub mod depth_io;
pub mod formats;
pub mod manifest;

pub use sfm_ttr_core as core;

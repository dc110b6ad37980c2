//! Epipolar-masked attention matching for satellite image pairs.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] evaluates RPC cameras, fits patch-local affine cameras and
//!   builds affine fundamental matrices.
//! * [`epipolar`] turns a fundamental matrix into symmetric epipolar distances,
//!   banded attention masks and the per-layer band schedule.
//! * [`nn`] holds the dense kernels (linear maps, LoRA, attention, layer norm,
//!   convolutions) with hand-derived backward passes and a gradient checker.
//! * [`matcher`] assembles the coarse-to-fine matching network at toy scale.
//! * [`groundtruth`] renders synthetic pushbroom-style scenes and extracts
//!   ground-truth correspondences with bidirectional 3D checks.
//! * [`evaluation`] computes precision, pose-error AUC and bin-weighted
//!   aggregates.
//! * [`train`] is the small supervised training loop (AdamW, warm-up,
//!   multi-step decay, accumulation, clipping, two-stage LoRA training).
//! * [`io`] reads and writes the on-disk formats (PGM, WPM1, JSON, CSV).

pub mod check;
pub mod epipolar;
pub mod evaluation;
pub mod geometry;
pub mod groundtruth;
pub mod io;
pub mod matcher;
pub mod nn;
pub mod train;

mod pixel;

pub use pixel::Pixel;

//! Synthetic stereo scenes and world-point ground truth.
//!
//! A scene is a textured heightfield seen by two oblique affine cameras. Each
//! pixel of each rendered patch stores the world point it sees, so matches can
//! be labelled by warping through the cameras and comparing world points.

mod gt;
mod scene;

pub use gt::{
    default_delta_3d, epipolar_consistency_report, gt_matches, sample_world_point, supervision, warp_checked, warp_gt,
    ConsistencyReport, GtMatch, GtMatchSet,
};
pub use scene::{
    albedo, cast_ray, generate_scene, oblique_camera, view_vector, Heightfield, SceneConfig, SceneData, SyntheticScene,
    TerrainKind, ViewAngles,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GtError {
    #[error("invalid scene config field `{field}`: {msg}")]
    Config { field: String, msg: String },
}

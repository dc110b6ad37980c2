//! Satellite camera geometry: RPC evaluation, patch-local affine cameras and
//! affine fundamental matrices.

mod affine;
mod frame;
mod fundamental;
mod rpc;

pub use affine::{affine_project, crop_camera, fit_affine_camera, AffineCamera, FitGrid, GroundBox, PatchFootprint};
pub use frame::{Geodetic, LocalFrame};
pub use fundamental::{
    affine_fundamental_from_cameras, affine_fundamental_from_matches, fit_affine_fundamental, AffineFundamental,
    RansacConfig, RobustFit, STRUCT_EPS,
};
pub use rpc::{rpc_monomials, rpc_project, RpcModel, RPC_TERMS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rpc denominator {0:e} is too close to zero")]
    SingularEvaluation(f64),
    #[error("geodetic input outside the rpc domain (normalized {0:?})")]
    Domain([f64; 3]),
    #[error("invalid rpc model: {0}")]
    InvalidRpc(String),
    #[error("invalid footprint: {0}")]
    InvalidFootprint(String),
    #[error("affine fit design matrix is rank deficient")]
    RankDeficientFit,
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("need at least 4 matches, got {0}")]
    NotEnoughMatches(usize),
    #[error("matrix does not have the affine zero pattern (max upper-left entry {0:e})")]
    NotAffine(f64),
}

//! Dense kernels with hand-derived backward passes.
//!
//! Every layer exposes `forward` returning its output plus whatever it needs
//! for the backward pass, and `backward` that accumulates parameter gradients
//! into a same-shaped gradient instance and returns the input gradient.

mod attention;
mod conv;
mod gradcheck;
mod linear;
mod norm;
mod params;
mod pe;

pub use attention::{
    linear_attention, linear_attention_backward, linear_attention_segmented, linear_attention_segmented_backward,
    linear_attention_weights, masked_softmax, masked_softmax_backward, sdp_attention,
    sdp_attention_backward, LinearAttentionCache, SdpCache, SegmentedLinearCache, MASK_NEG,
};
pub use conv::{col2im_3x3, im2col_3x3, relu, relu_backward, upsample2x, upsample2x_backward, Conv};
pub use gradcheck::{central_difference, gradcheck, gradcheck_at, GradReport};
pub use linear::{linear_fwd, Linear, LoraAdapter};
pub use norm::{LayerNorm, LayerNormCache, LN_EPS};
pub use params::{assign, flatten, map_params, param_count, zeros_like, ParamInfo, Params};
pub(crate) use params::{impl_params_for_fields, join as params_join};
pub use pe::sinusoidal_pe_2d;

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention row {0} has no admissible key")]
    EmptyMaskRow(usize),
    #[error("positional encoding dimension {0} is not divisible by 4")]
    PeDimension(usize),
    #[error("non-finite value at {0}")]
    NonFinite(String),
}

/// Token matrix `n x d` laid out over an `h x w` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub data: Array2<f64>,
    pub h: usize,
    pub w: usize,
}

impl FeatureSeq {
    pub fn new(data: Array2<f64>, h: usize, w: usize) -> Result<Self, NnError> {
        if data.nrows() != h * w {
            return Err(NnError::Shape(format!("{} tokens for a {h}x{w} grid", data.nrows())));
        }
        Ok(Self { data, h, w })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

pub(crate) fn check_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<(), NnError> {
    if got != want {
        return Err(NnError::Shape(format!("{what}: got {got:?}, expected {want:?}")));
    }
    Ok(())
}

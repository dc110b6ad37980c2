//! Symmetric epipolar distance, banded attention masks and the band schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AffineFundamental;
use crate::Pixel;

const MIN_LINE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpipolarError {
    #[error("epipolar line normal has norm {0:e}")]
    DegenerateLine(f64),
    #[error("band width must be positive, got {0}")]
    InvalidBand(f64),
}

/// Mean of the distances from `x_R` to the epipolar line of `x_L` and from
/// `x_L` to the epipolar line of `x_R`. Invariant to scaling of `F`, and
/// exactly symmetric under `(F, x_L, x_R) -> (Fᵀ, x_R, x_L)`.
pub fn symmetric_epipolar_distance(f: &AffineFundamental, xl: &Pixel, xr: &Pixel) -> Result<f64, EpipolarError> {
    let line_r = f.right_line(xl);
    let line_l = f.left_line(xr);
    let nr = line_r.x.hypot(line_r.y);
    let nl = line_l.x.hypot(line_l.y);
    for n in [nr, nl] {
        if !(n >= MIN_LINE_NORM) {
            return Err(EpipolarError::DegenerateLine(n));
        }
    }
    let hr = xr.homogeneous();
    let hl = xl.homogeneous();
    let alg = (0.5 * (hr.dot(&line_r) + hl.dot(&line_l))).abs();
    Ok(0.5 * alg / nr + 0.5 * alg / nl)
}

/// Coarse cell centers of a `rows x cols` grid with stride `r_c`, flattened row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseGrid {
    pub rows: usize,
    pub cols: usize,
    pub r_c: usize,
}

impl CoarseGrid {
    pub fn square(p: usize, r_c: usize) -> Self {
        Self { rows: p / r_c, cols: p / r_c, r_c }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, index: usize) -> Pixel {
        let s = self.r_c as f64;
        Pixel::new(((index / self.cols) as f64 + 0.5) * s, ((index % self.cols) as f64 + 0.5) * s)
    }

    /// Flat index of the cell containing `px`, if inside the grid.
    pub fn cell_of(&self, px: &Pixel) -> Option<usize> {
        let r = (px.row / self.r_c as f64).floor();
        let c = (px.col / self.r_c as f64).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some(r as usize * self.cols + c as usize)
    }
}

/// Dense `n_L x n_R` admissibility over coarse cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarMask {
    pub admissible: Array2<bool>,
    pub band_width: f64,
    pub left: CoarseGrid,
    pub right: CoarseGrid,
}

impl EpipolarMask {
    pub fn count(&self) -> usize {
        self.admissible.iter().filter(|&&v| v).count()
    }

    pub fn transposed(&self) -> Array2<bool> {
        self.admissible.t().to_owned()
    }
}

/// `admissible[i][j] = d_sym(c_i, c_j) < b/2`.
pub fn build_epipolar_mask(
    f: &AffineFundamental,
    left: &CoarseGrid,
    right: &CoarseGrid,
    b: f64,
) -> Result<EpipolarMask, EpipolarError> {
    if !(b > 0.0) {
        return Err(EpipolarError::InvalidBand(b));
    }
    let rc: Vec<Pixel> = (0..right.len()).map(|j| right.center(j)).collect();
    let mut admissible = Array2::from_elem((left.len(), right.len()), false);
    for i in 0..left.len() {
        let ci = left.center(i);
        for (j, cj) in rc.iter().enumerate() {
            admissible[(i, j)] = symmetric_epipolar_distance(f, &ci, cj)? < 0.5 * b;
        }
    }
    Ok(EpipolarMask { admissible, band_width: b, left: *left, right: *right })
}

/// Linear narrowing of the band over the masked cross-attention layers, with
/// no masking during the first `n_m` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSchedule {
    pub p: f64,
    pub gamma: f64,
    pub n_c: usize,
    pub n_m: usize,
}

impl BandSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.n_c == 0 {
            return Err("n_c must be at least 1".into());
        }
        if !(self.p > 0.0) {
            return Err(format!("p must be positive, got {}", self.p));
        }
        Ok(())
    }

    pub fn final_width(&self) -> f64 {
        self.gamma * self.p
    }
}

/// Band width for layer `l` at `epoch`, or `None` while masking is warming up.
pub fn band_width_at(s: &BandSchedule, layer: usize, epoch: usize) -> Option<f64> {
    if epoch < s.n_m {
        return None;
    }
    let last = s.n_c.saturating_sub(1);
    if layer >= last {
        return Some(s.final_width());
    }
    let t = layer as f64 / last as f64;
    Some(s.p - (s.p - s.final_width()) * t)
}

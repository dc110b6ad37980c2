use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Continuous image coordinate. Pixel `(r, c)` of an image covers
/// `[r, r+1) x [c, c+1)`; its center is at `(r + 0.5, c + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub row: f64,
    pub col: f64,
}

impl Pixel {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    /// Homogeneous image point `(x, y, 1)` with `x = col`, `y = row`.
    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.col, self.row, 1.0)
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }

    pub fn is_finite(&self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }
}

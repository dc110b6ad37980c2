use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{affine_project, AffineCamera, GeometryError};
use crate::epipolar::symmetric_epipolar_distance;
use crate::Pixel;

/// Tolerance for the affine zero pattern and for rank tests on fits.
pub const STRUCT_EPS: f64 = 1e-9;

/// Fundamental matrix between two affine views, with `x_Rᵀ F x_L = 0` for
/// homogeneous points `x = (col, row, 1)`:
///
/// ```text
///     [0 0 a]
/// F = [0 0 b]
///     [c d e]
/// ```
///
/// `(a, b)` is the normal of every epipolar line in the right image and
/// `(c, d)` the normal of every epipolar line in the left image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 9]", try_from = "[f64; 9]")]
pub struct AffineFundamental {
    f: Matrix3<f64>,
}

impl From<AffineFundamental> for [f64; 9] {
    fn from(f: AffineFundamental) -> Self {
        let m = f.f;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }
}

impl TryFrom<[f64; 9]> for AffineFundamental {
    type Error = GeometryError;

    fn try_from(v: [f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }
}

impl AffineFundamental {
    /// Validate the zero pattern and normalize to unit Frobenius norm with the
    /// largest-magnitude entry positive.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        Ok(Self::unnormalized(m)?.normalized())
    }

    /// Validate the zero pattern but keep the given scale.
    pub fn unnormalized(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let norm = m.norm();
        if !(norm > 0.0) || m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Degenerate("fundamental matrix is zero or non-finite".into()));
        }
        let block = [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if block > STRUCT_EPS * norm {
            return Err(GeometryError::NotAffine(block / norm));
        }
        Ok(Self { f: m })
    }

    /// Unit Frobenius norm, exact zeros in the upper-left block, largest-|entry| positive.
    pub fn normalized(&self) -> Self {
        let mut m = self.f / self.f.norm();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            m[(r, c)] = 0.0;
        }
        m /= m.norm();
        let mut big = 0.0_f64;
        for v in m.iter() {
            if v.abs() > big.abs() {
                big = *v;
            }
        }
        if big < 0.0 {
            m = -m;
        }
        Self { f: m }
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self { f: self.f * lambda }
    }

    pub fn transpose(&self) -> Self {
        Self { f: self.f.transpose() }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.f
    }

    /// `x_Rᵀ F x_L`.
    pub fn algebraic(&self, xl: &Pixel, xr: &Pixel) -> f64 {
        xr.homogeneous().dot(&(self.f * xl.homogeneous()))
    }

    /// Normal `(a, b)` of the right-image epipolar lines.
    pub fn right_normal(&self) -> [f64; 2] {
        [self.f[(0, 2)], self.f[(1, 2)]]
    }

    /// Normal `(c, d)` of the left-image epipolar lines.
    pub fn left_normal(&self) -> [f64; 2] {
        [self.f[(2, 0)], self.f[(2, 1)]]
    }

    /// Right-image epipolar line `(a, b, c)` with `a·x + b·y + c = 0` for `x_L`.
    pub fn right_line(&self, xl: &Pixel) -> Vector3<f64> {
        self.f * xl.homogeneous()
    }

    /// Left-image epipolar line for `x_R`.
    pub fn left_line(&self, xr: &Pixel) -> Vector3<f64> {
        self.f.transpose() * xr.homogeneous()
    }
}

/// Gold-standard affine fundamental estimate from correspondences `(x_L, x_R)`.
///
/// Minimizes the orthogonal distance of the stacked 4-vectors
/// `(x_R, y_R, x_L, y_L)` to a hyperplane: the hyperplane normal is the
/// smallest right singular vector of the centered data, and the offset
/// follows from the centroid.
pub fn fit_affine_fundamental(matches: &[(Pixel, Pixel)]) -> Result<AffineFundamental, GeometryError> {
    if matches.len() < 4 {
        return Err(GeometryError::NotEnoughMatches(matches.len()));
    }
    let n = matches.len() as f64;
    let mut mean = [0.0; 4];
    for (l, r) in matches {
        for (m, v) in mean.iter_mut().zip([r.col, r.row, l.col, l.row]) {
            *m += v / n;
        }
    }
    let mut a = DMatrix::<f64>::zeros(matches.len(), 4);
    for (k, (l, r)) in matches.iter().enumerate() {
        for (j, v) in [r.col, r.row, l.col, l.row].into_iter().enumerate() {
            a[(k, j)] = v - mean[j];
        }
    }
    // Rows >= 4 so the SVD yields all 4 right singular vectors.
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let s1 = s[order[0]];
    let s3 = s[order[2]];
    if !(s1 > 0.0) || s3 / s1 < STRUCT_EPS {
        return Err(GeometryError::Degenerate(format!(
            "correspondences do not determine a unique affine epipolar geometry (singular value ratio {:e})",
            if s1 > 0.0 { s3 / s1 } else { 0.0 }
        )));
    }
    let v = v_t.row(order[3]);
    let (fa, fb, fc, fd) = (v[0], v[1], v[2], v[3]);
    let fe = -(fa * mean[0] + fb * mean[1] + fc * mean[2] + fd * mean[3]);
    let m = Matrix3::new(0.0, 0.0, fa, 0.0, 0.0, fb, fc, fd, fe);
    Ok(AffineFundamental { f: m }.normalized())
}

/// F from two affine cameras via a 3x3x3 lattice of world points over the
/// left footprint. The height span is widened to the ground extent when the
/// footprint is flat, since any non-coplanar set determines F for affine views.
pub fn affine_fundamental_from_cameras(
    left: &AffineCamera,
    right: &AffineCamera,
) -> Result<AffineFundamental, GeometryError> {
    let g = &left.footprint.ground;
    let cx = 0.5 * (g.x_min + g.x_max);
    let cy = 0.5 * (g.y_min + g.y_max);
    let hx = (0.5 * (g.x_max - g.x_min)).max(1.0);
    let hy = (0.5 * (g.y_max - g.y_min)).max(1.0);
    let cz = 0.5 * (left.footprint.h_min + left.footprint.h_max);
    let hz = (0.5 * (left.footprint.h_max - left.footprint.h_min)).max(hx.max(hy));
    let mut pts = Vec::with_capacity(27);
    for i in [-1.0, 0.0, 1.0] {
        for j in [-1.0, 0.0, 1.0] {
            for k in [-1.0, 0.0, 1.0] {
                let w = Vector3::new(cx + i * hx, cy + j * hy, cz + k * hz);
                pts.push((affine_project(left, &w), affine_project(right, &w)));
            }
        }
    }
    fit_affine_fundamental(&pts).map_err(|e| match e {
        GeometryError::Degenerate(_) => {
            GeometryError::Degenerate("camera pair does not span 3D (identical or parallel viewing geometry)".into())
        }
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iters: usize,
    /// Inlier threshold on the symmetric epipolar distance, pixels.
    pub inlier_tol: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iters: 1000, inlier_tol: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustFit {
    pub f: AffineFundamental,
    /// Indices into the input, ascending.
    pub inliers: Vec<usize>,
}

fn inliers_of(f: &AffineFundamental, matches: &[(Pixel, Pixel)], tol: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, (l, r))| symmetric_epipolar_distance(f, l, r).map(|d| d < tol).unwrap_or(false))
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC over minimal 4-point samples, then a refit on the consensus set.
pub fn affine_fundamental_from_matches(
    matches: &[(Pixel, Pixel)],
    cfg: &RansacConfig,
) -> Result<RobustFit, GeometryError> {
    if matches.len() < 4 {
        return Err(GeometryError::NotEnoughMatches(matches.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<RobustFit> = None;
    let mut subset = Vec::with_capacity(4);
    for _ in 0..cfg.iters.max(1) {
        subset.clear();
        subset.extend(sample(&mut rng, matches.len(), 4).into_iter().map(|i| matches[i]));
        let Ok(f) = fit_affine_fundamental(&subset) else { continue };
        let inliers = inliers_of(&f, matches, cfg.inlier_tol);
        if best.as_ref().map_or(true, |b| inliers.len() > b.inliers.len()) {
            best = Some(RobustFit { f, inliers });
        }
    }
    let best = match best {
        Some(b) => b,
        // Every sample was degenerate; the full set decides.
        None => {
            let f = fit_affine_fundamental(matches)?;
            let inliers = inliers_of(&f, matches, cfg.inlier_tol);
            RobustFit { f, inliers }
        }
    };
    if best.inliers.len() < 4 {
        return Ok(best);
    }
    let consensus: Vec<_> = best.inliers.iter().map(|&i| matches[i]).collect();
    match fit_affine_fundamental(&consensus) {
        Ok(f) => {
            let inliers = inliers_of(&f, matches, cfg.inlier_tol);
            Ok(RobustFit { f, inliers })
        }
        Err(_) => Ok(best),
    }
}

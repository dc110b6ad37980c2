use nalgebra::{DMatrix, Matrix2x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{rpc_project, GeometryError, LocalFrame, RpcModel};
use crate::Pixel;

/// Axis-aligned ground rectangle in the local metric frame (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// Region an affine camera is fit over: the patch position in the full
/// image, the ground it covers and the local height range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchFootprint {
    pub row0: f64,
    pub col0: f64,
    pub size: usize,
    pub ground: GroundBox,
    pub h_min: f64,
    pub h_max: f64,
    pub frame: LocalFrame,
}

impl PatchFootprint {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.size == 0 {
            return Err(GeometryError::InvalidFootprint("patch size must be positive".into()));
        }
        if !(self.h_min <= self.h_max) {
            return Err(GeometryError::InvalidFootprint(format!(
                "height range [{}, {}] is empty",
                self.h_min, self.h_max
            )));
        }
        let g = &self.ground;
        if !(g.x_min <= g.x_max && g.y_min <= g.y_max) {
            return Err(GeometryError::InvalidFootprint("ground box is empty".into()));
        }
        Ok(())
    }
}

/// Sample counts for the affine fit: `n_xy` per ground axis, `n_h` heights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitGrid {
    pub n_xy: usize,
    pub n_h: usize,
}

impl Default for FitGrid {
    fn default() -> Self {
        Self { n_xy: 5, n_h: 3 }
    }
}

/// 2x4 projection from homogeneous local world points to patch pixels `(row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraRecord", try_from = "CameraRecord")]
pub struct AffineCamera {
    pub matrix: Matrix2x4<f64>,
    pub fit_rms: f64,
    pub footprint: PatchFootprint,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    /// Row-major 2x4.
    matrix: [f64; 8],
    fit_rms: f64,
    footprint: PatchFootprint,
}

impl From<AffineCamera> for CameraRecord {
    fn from(c: AffineCamera) -> Self {
        let mut matrix = [0.0; 8];
        for r in 0..2 {
            for k in 0..4 {
                matrix[r * 4 + k] = c.matrix[(r, k)];
            }
        }
        Self { matrix, fit_rms: c.fit_rms, footprint: c.footprint }
    }
}

impl TryFrom<CameraRecord> for AffineCamera {
    type Error = String;

    fn try_from(r: CameraRecord) -> Result<Self, String> {
        if r.matrix.iter().any(|v| !v.is_finite()) {
            return Err("camera matrix has non-finite entries".into());
        }
        Ok(Self { matrix: Matrix2x4::from_row_slice(&r.matrix), fit_rms: r.fit_rms, footprint: r.footprint })
    }
}

impl AffineCamera {
    pub fn new(matrix: Matrix2x4<f64>, footprint: PatchFootprint) -> Self {
        Self { matrix, fit_rms: 0.0, footprint }
    }

    pub fn project(&self, world: &Vector3<f64>) -> Pixel {
        affine_project(self, world)
    }

    /// Unit viewing direction: the null space of the 2x3 linear block, oriented upward.
    pub fn view_direction(&self) -> Vector3<f64> {
        let a = Vector3::new(self.matrix[(0, 0)], self.matrix[(0, 1)], self.matrix[(0, 2)]);
        let b = Vector3::new(self.matrix[(1, 0)], self.matrix[(1, 1)], self.matrix[(1, 2)]);
        let n = a.cross(&b);
        let n = n / n.norm();
        if n.z < 0.0 {
            -n
        } else {
            n
        }
    }

    /// Points on the ray through `px`: returns a point on the ray at height `z`
    /// plus the (upward) direction. Requires a non-horizontal view direction.
    pub fn ray_at_height(&self, px: &Pixel, z: f64) -> Option<Vector3<f64>> {
        // Solve the 2x2 system in (x, y) with z fixed.
        let m = &self.matrix;
        let rhs0 = px.row - m[(0, 2)] * z - m[(0, 3)];
        let rhs1 = px.col - m[(1, 2)] * z - m[(1, 3)];
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if det.abs() < 1e-15 {
            return None;
        }
        let x = (rhs0 * m[(1, 1)] - m[(0, 1)] * rhs1) / det;
        let y = (m[(0, 0)] * rhs1 - m[(1, 0)] * rhs0) / det;
        Some(Vector3::new(x, y, z))
    }
}

/// `(row, col) = P · (X, Y, Z, 1)`.
pub fn affine_project(cam: &AffineCamera, world: &Vector3<f64>) -> Pixel {
    let m = &cam.matrix;
    let w = Vector4::new(world.x, world.y, world.z, 1.0);
    Pixel::new(m.row(0).dot(&w.transpose()), m.row(1).dot(&w.transpose()))
}

/// Shift the camera's pixel origin by `(row0, col0)`.
pub fn crop_camera(cam: &AffineCamera, row0: f64, col0: f64) -> AffineCamera {
    let mut out = cam.clone();
    out.matrix[(0, 3)] -= row0;
    out.matrix[(1, 3)] -= col0;
    out.footprint.row0 += row0;
    out.footprint.col0 += col0;
    out
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

/// Least-squares affine approximation of an RPC over a patch footprint.
///
/// Samples an `n_xy x n_xy x n_h` lattice over the footprint, projects every
/// sample through the RPC, and solves for the 2x4 matrix mapping local world
/// points to patch-local pixels (full-image pixels minus the footprint origin).
pub fn fit_affine_camera(model: &RpcModel, fp: &PatchFootprint, grid: FitGrid) -> Result<AffineCamera, GeometryError> {
    model.validate()?;
    fp.validate()?;
    if grid.n_xy < 2 || grid.n_h < 2 {
        return Err(GeometryError::InvalidFootprint(format!(
            "fit grid needs at least 2 samples per axis, got {}x{}",
            grid.n_xy, grid.n_h
        )));
    }
    let xs = linspace(fp.ground.x_min, fp.ground.x_max, grid.n_xy);
    let ys = linspace(fp.ground.y_min, fp.ground.y_max, grid.n_xy);
    let zs = linspace(fp.h_min, fp.h_max, grid.n_h);
    let n = xs.len() * ys.len() * zs.len();
    let mut design = DMatrix::<f64>::zeros(n, 4);
    let mut target = DMatrix::<f64>::zeros(n, 2);
    let mut k = 0;
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let geo = fp.frame.to_geodetic(&Vector3::new(x, y, z));
                let px = rpc_project(model, &geo)?;
                design[(k, 0)] = x;
                design[(k, 1)] = y;
                design[(k, 2)] = z;
                design[(k, 3)] = 1.0;
                target[(k, 0)] = px.row - fp.row0;
                target[(k, 1)] = px.col - fp.col0;
                k += 1;
            }
        }
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(GeometryError::RankDeficientFit);
    }
    let sol = svd.solve(&target, 0.0).map_err(|_| GeometryError::RankDeficientFit)?;
    let mut matrix = Matrix2x4::zeros();
    for r in 0..2 {
        for c in 0..4 {
            matrix[(r, c)] = sol[(c, r)];
        }
    }
    let resid = &design * &sol - &target;
    let fit_rms = (resid.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    Ok(AffineCamera { matrix, fit_rms, footprint: *fp })
}

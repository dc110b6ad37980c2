use nalgebra::{Matrix2x4, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GtError;
use crate::geometry::{AffineCamera, Geodetic, GroundBox, LocalFrame, PatchFootprint};
use crate::io::{quantize_u8, WorldPointMap};
use crate::Pixel;

const BISECTION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    /// Constant height.
    Planar,
    /// Smooth sum of random plane waves.
    Relief,
    /// Two plateaus separated by a wall along `x = 0`.
    Step,
}

/// Off-nadir angle, azimuth (clockwise from north) and image track rotation, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAngles {
    pub off_nadir: f64,
    pub azimuth: f64,
    #[serde(default)]
    pub track: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub p: usize,
    pub seed: u64,
    /// Ground sample distance, meters per pixel.
    pub gsd: f64,
    pub terrain: TerrainKind,
    pub height_amplitude: f64,
    pub base_height: f64,
    pub left_view: ViewAngles,
    pub right_view: ViewAngles,
    /// Extra pixel offset `(row, col)` of the right patch.
    pub right_shift: [f64; 2],
    pub texture_octaves: usize,
    /// Coarsest texture cell, in pixels.
    pub texture_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            p: 64,
            seed: 0,
            gsd: 1.0,
            terrain: TerrainKind::Relief,
            height_amplitude: 4.0,
            base_height: 0.0,
            left_view: ViewAngles { off_nadir: 10.0, azimuth: 90.0, track: 0.0 },
            right_view: ViewAngles { off_nadir: 10.0, azimuth: 270.0, track: 0.0 },
            right_shift: [0.0, 0.0],
            texture_octaves: 4,
            texture_scale: 8.0,
        }
    }
}

fn bad(field: &str, msg: impl Into<String>) -> GtError {
    GtError::Config { field: field.to_string(), msg: msg.into() }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), GtError> {
        if self.p < 8 {
            return Err(bad("p", format!("patch must be at least 8 px, got {}", self.p)));
        }
        if !(self.gsd > 0.0) {
            return Err(bad("gsd", "must be positive"));
        }
        if !(self.height_amplitude >= 0.0) {
            return Err(bad("height_amplitude", "must be non-negative"));
        }
        for (name, v) in [("left_view", &self.left_view), ("right_view", &self.right_view)] {
            if !(v.off_nadir >= 0.0 && v.off_nadir < 60.0) {
                return Err(bad(&format!("{name}.off_nadir"), format!("must be in [0, 60), got {}", v.off_nadir)));
            }
        }
        if self.texture_octaves == 0 || !(self.texture_scale > 0.0) {
            return Err(bad("texture_octaves", "texture needs at least one octave and a positive scale"));
        }
        let a = view_vector(&self.left_view);
        let b = view_vector(&self.right_view);
        if a.cross(&b).norm() < 1e-9 {
            return Err(bad("right_view", "view directions are parallel; the pair has no parallax"));
        }
        Ok(())
    }
}

/// Unit vector pointing from the ground toward the sensor.
pub fn view_vector(v: &ViewAngles) -> Vector3<f64> {
    let (t, a) = (v.off_nadir.to_radians(), v.azimuth.to_radians());
    Vector3::new(t.sin() * a.sin(), t.sin() * a.cos(), t.cos())
}

/// Heights sampled on a regular ground grid, evaluated bilinearly.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub heights: Array2<f64>,
    /// Ground coordinates of sample `(0, 0)`; rows step along `y`, columns along `x`.
    pub x0: f64,
    pub y0: f64,
    pub step: f64,
}

impl Heightfield {
    pub fn at(&self, x: f64, y: f64) -> Option<f64> {
        let u = (x - self.x0) / self.step;
        let v = (y - self.y0) / self.step;
        let (h, w) = self.heights.dim();
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let (c, r) = ((u.floor() as usize).min(w - 2), (v.floor() as usize).min(h - 2));
        let (fu, fv) = (u - c as f64, v - r as f64);
        let hm = &self.heights;
        Some(
            (1.0 - fv) * ((1.0 - fu) * hm[(r, c)] + fu * hm[(r, c + 1)])
                + fv * ((1.0 - fu) * hm[(r + 1, c)] + fu * hm[(r + 1, c + 1)]),
        )
    }

    pub fn range(&self) -> (f64, f64) {
        self.heights.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: usize, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix((iy as u64) ^ ((octave as u64) << 48))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Multi-octave value noise over ground coordinates, in `[0, 1]`.
pub fn albedo(cfg: &SceneConfig, x: f64, y: f64) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut cell = cfg.texture_scale * cfg.gsd;
    let mut amp = 1.0;
    for o in 0..cfg.texture_octaves {
        let (u, v) = (x / cell, y / cell);
        let (iu, iv) = (u.floor(), v.floor());
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fu, fv) = (s(u - iu), s(v - iv));
        let (iu, iv) = (iu as i64, iv as i64);
        let n00 = lattice(cfg.seed, o, iu, iv);
        let n10 = lattice(cfg.seed, o, iu + 1, iv);
        let n01 = lattice(cfg.seed, o, iu, iv + 1);
        let n11 = lattice(cfg.seed, o, iu + 1, iv + 1);
        sum += amp * ((1.0 - fv) * ((1.0 - fu) * n00 + fu * n10) + fv * ((1.0 - fu) * n01 + fu * n11));
        norm += amp;
        amp *= 0.5;
        cell *= 0.5;
    }
    sum / norm
}

/// Camera mapping ground to patch pixels: ground points are slid along the
/// view direction onto `z = 0`, rotated by the track angle and scaled by GSD.
/// `(0, 0, base_height)` lands on the patch center plus `shift`.
pub fn oblique_camera(cfg: &SceneConfig, view: &ViewAngles, shift: [f64; 2], ground: GroundBox, hr: (f64, f64)) -> AffineCamera {
    let t = view.off_nadir.to_radians().tan();
    let a = view.azimuth.to_radians();
    let (px, py) = (t * a.sin(), t * a.cos());
    let g = cfg.gsd;
    // Before rotation: row = -(y - z py)/g, col = (x - z px)/g.
    let row0 = [0.0, -1.0 / g, py / g];
    let col0 = [1.0 / g, 0.0, -px / g];
    let (s, c) = view.track.to_radians().sin_cos();
    let mut m = Matrix2x4::zeros();
    for k in 0..3 {
        m[(0, k)] = c * row0[k] - s * col0[k];
        m[(1, k)] = s * row0[k] + c * col0[k];
    }
    let half = cfg.p as f64 / 2.0;
    let zb = cfg.base_height;
    m[(0, 3)] = half + shift[0] - m[(0, 2)] * zb;
    m[(1, 3)] = half + shift[1] - m[(1, 2)] * zb;
    let footprint = PatchFootprint {
        row0: 0.0,
        col0: 0.0,
        size: cfg.p,
        ground,
        h_min: hr.0,
        h_max: hr.1,
        frame: LocalFrame::new(Geodetic { lat: 30.3, lon: -81.7, height: 0.0 }),
    };
    AffineCamera::new(m, footprint)
}

/// Rendered pair plus everything a ground-truth oracle needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub image_l: Array2<u8>,
    pub image_r: Array2<u8>,
    pub wpm_l: WorldPointMap,
    pub wpm_r: WorldPointMap,
    pub cam_l: AffineCamera,
    pub cam_r: AffineCamera,
}

impl SceneData {
    pub fn p(&self) -> usize {
        self.image_l.nrows()
    }

    /// Images as `[0, 1]` floats.
    pub fn images_f64(&self) -> (Array2<f64>, Array2<f64>) {
        (self.image_l.mapv(|v| v as f64 / 255.0), self.image_r.mapv(|v| v as f64 / 255.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cfg: SceneConfig,
    pub terrain: Heightfield,
    pub data: SceneData,
}

fn terrain(cfg: &SceneConfig, ground: &GroundBox) -> Heightfield {
    let step = 0.5 * cfg.gsd;
    let w = ((ground.x_max - ground.x_min) / step).ceil() as usize + 1;
    let h = ((ground.y_max - ground.y_min) / step).ceil() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e44_a1d3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|k| {
            let wavelength = cfg.p as f64 * cfg.gsd / (1.0 + k as f64);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let f = std::f64::consts::TAU / wavelength;
            (f * dir.cos(), f * dir.sin(), rng.gen_range(0.0..std::f64::consts::TAU), 1.0 / (1.0 + k as f64))
        })
        .collect();
    let wsum: f64 = waves.iter().map(|w| w.3).sum();
    let heights = Array2::from_shape_fn((h, w), |(r, c)| {
        let x = ground.x_min + c as f64 * step;
        let y = ground.y_min + r as f64 * step;
        let a = cfg.height_amplitude;
        cfg.base_height
            + match cfg.terrain {
                TerrainKind::Planar => 0.0,
                TerrainKind::Relief => a * waves.iter().map(|&(kx, ky, ph, w)| w * (kx * x + ky * y + ph).sin()).sum::<f64>() / wsum,
                TerrainKind::Step => {
                    if x > 0.0 {
                        a
                    } else {
                        0.0
                    }
                }
            }
    });
    Heightfield { heights, x0: ground.x_min, y0: ground.y_min, step }
}

/// Highest intersection of the ray through `px` with the terrain.
pub fn cast_ray(cam: &AffineCamera, hf: &Heightfield, px: &Pixel) -> Option<Vector3<f64>> {
    cast_ray_within(cam, hf, px, hf.range())
}

fn cast_ray_within(cam: &AffineCamera, hf: &Heightfield, px: &Pixel, (lo, hi): (f64, f64)) -> Option<Vector3<f64>> {
    let (z_top, z_bot) = (hi + 1.0, lo - 1.0);
    let at = |z: f64| cam.ray_at_height(px, z);
    let f = |z: f64| -> Option<f64> {
        let p = at(z)?;
        Some(z - hf.at(p.x, p.y)?)
    };
    let p_top = at(z_top)?;
    let p_bot = at(z_bot)?;
    let slope = (p_top - p_bot).xy().norm() / (z_top - z_bot);
    let dz = if slope > 0.0 { (0.5 * hf.step / slope).min(0.25) } else { 0.25 };
    let mut za = z_top;
    let mut fa = f(za)?;
    if fa <= 0.0 {
        return None;
    }
    loop {
        let zb = (za - dz).max(z_bot);
        let fb = f(zb)?;
        if fb <= 0.0 {
            let (mut a, mut b, mut fa, mut fb) = (za, zb, fa, fb);
            while a - b > BISECTION_TOL {
                let m = 0.5 * (a + b);
                let fm = f(m)?;
                if fm > 0.0 {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                    fb = fm;
                }
            }
            let z = if fa != fb { a - fa * (b - a) / (fb - fa) } else { b };
            return at(z);
        }
        if zb <= z_bot {
            return None;
        }
        za = zb;
        fa = fb;
    }
}

fn render(cfg: &SceneConfig, cam: &AffineCamera, hf: &Heightfield) -> (Array2<u8>, WorldPointMap) {
    let p = cfg.p;
    let mut img = Array2::zeros((p, p));
    let mut points = Array2::from_elem((p, p), Vector3::repeat(f64::NAN));
    let mut valid = Array2::from_elem((p, p), false);
    let range = hf.range();
    for r in 0..p {
        for c in 0..p {
            let px = Pixel::new(r as f64 + 0.5, c as f64 + 0.5);
            if let Some(x) = cast_ray_within(cam, hf, &px, range) {
                img[(r, c)] = albedo(cfg, x.x, x.y);
                points[(r, c)] = x;
                valid[(r, c)] = true;
            }
        }
    }
    (quantize_u8(&img), WorldPointMap { points, valid })
}

/// Ground box covering both patches over the given height range, with margin.
fn cover(cams: &[&AffineCamera], p: usize, hr: (f64, f64), margin: f64) -> GroundBox {
    let mut b = GroundBox { x_min: f64::INFINITY, x_max: f64::NEG_INFINITY, y_min: f64::INFINITY, y_max: f64::NEG_INFINITY };
    for cam in cams {
        for (r, c) in [(0.0, 0.0), (0.0, p as f64), (p as f64, 0.0), (p as f64, p as f64)] {
            for z in [hr.0, hr.1] {
                let q = cam.ray_at_height(&Pixel::new(r, c), z).expect("oblique cameras have an invertible ground block");
                b.x_min = b.x_min.min(q.x);
                b.x_max = b.x_max.max(q.x);
                b.y_min = b.y_min.min(q.y);
                b.y_max = b.y_max.max(q.y);
            }
        }
    }
    GroundBox { x_min: b.x_min - margin, x_max: b.x_max + margin, y_min: b.y_min - margin, y_max: b.y_max + margin }
}

/// Deterministic synthetic stereo pair.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, GtError> {
    cfg.validate()?;
    let hr = (cfg.base_height - cfg.height_amplitude - 1.0, cfg.base_height + cfg.height_amplitude + 1.0);
    let zero = GroundBox { x_min: 0.0, x_max: 0.0, y_min: 0.0, y_max: 0.0 };
    let l0 = oblique_camera(cfg, &cfg.left_view, [0.0, 0.0], zero, hr);
    let r0 = oblique_camera(cfg, &cfg.right_view, cfg.right_shift, zero, hr);
    let ground = cover(&[&l0, &r0], cfg.p, hr, 4.0 * cfg.gsd);
    let hf = terrain(cfg, &ground);
    let (lo, hi) = hf.range();
    let cam_l = oblique_camera(cfg, &cfg.left_view, [0.0, 0.0], ground, (lo, hi));
    let cam_r = oblique_camera(cfg, &cfg.right_view, cfg.right_shift, ground, (lo, hi));
    let (image_l, wpm_l) = render(cfg, &cam_l, &hf);
    let (image_r, wpm_r) = render(cfg, &cam_r, &hf);
    Ok(SyntheticScene { cfg: cfg.clone(), terrain: hf, data: SceneData { image_l, image_r, wpm_l, wpm_r, cam_l, cam_r } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::affine_project;

    fn planar() -> SceneConfig {
        SceneConfig { terrain: TerrainKind::Planar, p: 32, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&planar()).unwrap();
        let b = generate_scene(&planar()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneConfig { seed: 1, ..planar() }).unwrap();
        assert_ne!(a.data.image_l, c.data.image_l);
    }

    #[test]
    fn parallel_views_are_rejected() {
        let cfg = SceneConfig { right_view: SceneConfig::default().left_view, ..Default::default() };
        assert!(matches!(generate_scene(&cfg), Err(GtError::Config { field, .. }) if field == "right_view"));
    }

    #[test]
    fn planar_world_maps_are_globally_affine() {
        let s = generate_scene(&planar()).unwrap();
        // On a plane every world point is an affine function of its pixel.
        let w = &s.data.wpm_l;
        let base = w.points[(0, 0)];
        let dr = w.points[(1, 0)] - base;
        let dc = w.points[(0, 1)] - base;
        let mut worst: f64 = 0.0;
        for ((r, c), x) in w.points.indexed_iter() {
            assert!(w.valid[(r, c)]);
            let pred = base + dr * r as f64 + dc * c as f64;
            worst = worst.max((x - pred).norm());
            assert!((x.z - s.cfg.base_height).abs() < 1e-9);
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn rendered_points_reproject() {
        let cfg = SceneConfig { terrain: TerrainKind::Relief, height_amplitude: 6.0, seed: 3, ..Default::default() };
        let s = generate_scene(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        for _ in 0..1000 {
            let (r, c) = (rng.gen_range(0..cfg.p), rng.gen_range(0..cfg.p));
            for (w, cam, hf) in [(&s.data.wpm_l, &s.data.cam_l, &s.terrain), (&s.data.wpm_r, &s.data.cam_r, &s.terrain)] {
                if !w.valid[(r, c)] {
                    continue;
                }
                let x = w.points[(r, c)];
                let px = affine_project(cam, &x);
                assert!((px.row - (r as f64 + 0.5)).abs() <= 0.5 && (px.col - (c as f64 + 0.5)).abs() <= 0.5);
                assert!((x.z - hf.at(x.x, x.y).unwrap()).abs() < 1e-2);
                checked += 1;
            }
        }
        assert!(checked > 1900);
    }

    #[test]
    fn texture_is_in_range_and_varied() {
        let cfg = SceneConfig::default();
        let vals: Vec<f64> = (0..200).map(|k| albedo(&cfg, k as f64 * 0.37, -(k as f64) * 0.11)).collect();
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var > 1e-3);
    }
}

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SceneData;
use crate::epipolar::{symmetric_epipolar_distance, CoarseGrid, EpipolarError};
use crate::geometry::{affine_project, AffineCamera, AffineFundamental};
use crate::io::WorldPointMap;
use crate::matcher::{FineModule, GtPair, MatcherConfig, Supervision};
use crate::Pixel;

/// Bilinear world point at a continuous pixel position. All four neighbouring
/// samples must be valid.
pub fn sample_world_point(map: &WorldPointMap, px: &Pixel) -> Option<Vector3<f64>> {
    let (h, w) = map.dim();
    let (u, v) = (px.col - 0.5, px.row - 0.5);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let (c, r) = ((u.floor() as usize).min(w - 2), (v.floor() as usize).min(h - 2));
    let (fu, fv) = (u - c as f64, v - r as f64);
    let mut acc = Vector3::zeros();
    for (dr, dc, wgt) in [(0, 0, (1.0 - fv) * (1.0 - fu)), (0, 1, (1.0 - fv) * fu), (1, 0, fv * (1.0 - fu)), (1, 1, fv * fu)] {
        if !map.valid[(r + dr, c + dc)] {
            return None;
        }
        acc += map.points[(r + dr, c + dc)] * wgt;
    }
    Some(acc)
}

/// One direction of the warp-and-check: world point at `px` in the source
/// image, projected into the target, compared to the target's own world point.
pub fn warp_checked(
    src: &WorldPointMap,
    dst: &WorldPointMap,
    dst_cam: &AffineCamera,
    px: &Pixel,
    delta_3d: f64,
) -> Option<Pixel> {
    let xs = sample_world_point(src, px)?;
    let q = affine_project(dst_cam, &xs);
    let xd = sample_world_point(dst, &q)?;
    ((xs - xd).norm_squared() < delta_3d).then_some(q)
}

/// `δ_3D = 0.5 · GSD`, compared against the squared 3D distance.
pub fn default_delta_3d(gsd: f64) -> f64 {
    0.5 * gsd
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtMatch {
    pub i: usize,
    pub j: usize,
    /// Left coarse cell center.
    pub left: Pixel,
    /// Projection of the left world point into the right patch.
    pub right: Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtMatchSet {
    pub grid: CoarseGrid,
    pub matches: Vec<GtMatch>,
    /// Cells that passed the forward check but not the backward one.
    pub unmatched_forward: usize,
    pub unmatched_backward: usize,
}

/// Coarse ground truth: warp every coarse center left-to-right and
/// right-to-left with the 3D check in each direction, keep mutual pairs.
pub fn gt_matches(scene: &SceneData, r_c: usize, delta_3d: f64) -> GtMatchSet {
    let grid = CoarseGrid::square(scene.p(), r_c);
    let fwd: Vec<Option<(usize, Pixel)>> = (0..grid.len())
        .map(|i| {
            let q = warp_checked(&scene.wpm_l, &scene.wpm_r, &scene.cam_r, &grid.center(i), delta_3d)?;
            Some((grid.cell_of(&q)?, q))
        })
        .collect();
    let bwd: Vec<Option<usize>> = (0..grid.len())
        .map(|j| {
            let q = warp_checked(&scene.wpm_r, &scene.wpm_l, &scene.cam_l, &grid.center(j), delta_3d)?;
            grid.cell_of(&q)
        })
        .collect();
    let mut matches = Vec::new();
    let mut unmatched_forward = 0;
    for (i, f) in fwd.iter().enumerate() {
        let Some((j, right)) = *f else { continue };
        if bwd[j] == Some(i) {
            matches.push(GtMatch { i, j, left: grid.center(i), right });
        } else {
            unmatched_forward += 1;
        }
    }
    let unmatched_backward = bwd.iter().enumerate().filter(|(j, b)| b.is_some_and(|i| fwd[i].map(|f| f.0) != Some(*j))).count();
    GtMatchSet { grid, matches, unmatched_forward, unmatched_backward }
}

/// Ground-truth right position of any left pixel, or `None` where the 3D check fails.
pub fn warp_gt(scene: &SceneData, px: &Pixel, delta_3d: f64) -> Option<Pixel> {
    warp_checked(&scene.wpm_l, &scene.wpm_r, &scene.cam_r, px, delta_3d)
}

/// Training labels for the matcher: coarse pairs plus the sub-pixel target of
/// each left fine-window center.
pub fn supervision(scene: &SceneData, gt: &GtMatchSet, cfg: &MatcherConfig, delta_3d: f64) -> Supervision {
    let pairs = gt
        .matches
        .iter()
        .map(|m| GtPair { i: m.i, j: m.j, target: warp_gt(scene, &FineModule::left_center(cfg, m.i), delta_3d) })
        .collect();
    Supervision { pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n: usize,
    pub max: f64,
    pub mean: f64,
}

/// `d_sym` of every ground-truth pair under `f`.
pub fn epipolar_consistency_report(gt: &GtMatchSet, f: &AffineFundamental) -> Result<ConsistencyReport, EpipolarError> {
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for m in &gt.matches {
        let d = symmetric_epipolar_distance(f, &m.left, &m.right)?;
        max = max.max(d);
        sum += d;
    }
    let n = gt.matches.len();
    Ok(ConsistencyReport { n, max, mean: if n > 0 { sum / n as f64 } else { 0.0 } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::{cast_ray, generate_scene, SceneConfig, TerrainKind, ViewAngles};
    use crate::geometry::affine_fundamental_from_cameras;

    /// Identical ground block for both cameras: on a plane the right patch is
    /// the left one translated.
    fn translated(shift: [f64; 2]) -> SceneConfig {
        SceneConfig {
            p: 32,
            terrain: TerrainKind::Planar,
            left_view: ViewAngles { off_nadir: 10.0, azimuth: 90.0, track: 0.0 },
            right_view: ViewAngles { off_nadir: 10.0, azimuth: 270.0, track: 0.0 },
            right_shift: shift,
            ..Default::default()
        }
    }

    #[test]
    fn planar_translation_gives_shifted_grid() {
        let s = generate_scene(&translated([4.0, -8.0])).unwrap();
        let gt = gt_matches(&s.data, 4, default_delta_3d(1.0));
        let side = 8i64;
        let mut expect = vec![];
        for i in 0..(side * side) {
            let (r, c) = (i / side + 1, i % side - 2);
            if (0..side).contains(&r) && (0..side).contains(&c) {
                expect.push((i as usize, (r * side + c) as usize));
            }
        }
        let got: Vec<(usize, usize)> = gt.matches.iter().map(|m| (m.i, m.j)).collect();
        assert_eq!(got, expect);
        for m in &gt.matches {
            assert!((m.right.row - m.left.row - 4.0).abs() < 1e-9 && (m.right.col - m.left.col + 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_threshold_is_empty() {
        let cfg = SceneConfig { terrain: TerrainKind::Relief, p: 32, ..Default::default() };
        let s = generate_scene(&cfg).unwrap();
        assert!(gt_matches(&s.data, 4, 0.0).matches.is_empty());
    }

    fn visible_oracle(s: &crate::groundtruth::SyntheticScene, x: &Vector3<f64>) -> bool {
        // March from x toward the right sensor; any terrain above the ray occludes.
        let u = s.data.cam_r.view_direction();
        let mut t = 0.05;
        while t < 40.0 {
            let q = x + u * t;
            if let Some(h) = s.terrain.at(q.x, q.y) {
                if h > q.z + 1e-6 {
                    return false;
                }
            }
            t += 0.05;
        }
        true
    }

    #[test]
    fn step_occlusions_are_excluded() {
        let cfg = SceneConfig {
            p: 32,
            terrain: TerrainKind::Step,
            height_amplitude: 12.0,
            left_view: ViewAngles { off_nadir: 5.0, azimuth: 90.0, track: 0.0 },
            right_view: ViewAngles { off_nadir: 35.0, azimuth: 90.0, track: 0.0 },
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        let delta = default_delta_3d(cfg.gsd);
        let gt = gt_matches(&s.data, 4, delta);
        let mut occluded_seen = 0;
        for i in 0..gt.grid.len() {
            let c = gt.grid.center(i);
            let Some(x) = sample_world_point(&s.data.wpm_l, &c) else { continue };
            let vis = visible_oracle(&s, &x);
            let in_gt = gt.matches.iter().any(|m| m.i == i);
            if !vis {
                occluded_seen += 1;
                assert!(!in_gt, "occluded cell {i} is in the ground truth");
            }
        }
        assert!(occluded_seen > 0, "fixture has no occlusion");
        assert!(!gt.matches.is_empty());
    }

    #[test]
    fn pairs_pass_both_directions_and_round_to_their_cell() {
        let cfg = SceneConfig { terrain: TerrainKind::Relief, height_amplitude: 5.0, seed: 2, ..Default::default() };
        let s = generate_scene(&cfg).unwrap();
        let delta = default_delta_3d(cfg.gsd);
        let gt = gt_matches(&s.data, 4, delta);
        assert!(gt.matches.len() > 100);
        for m in &gt.matches {
            assert!(warp_checked(&s.data.wpm_l, &s.data.wpm_r, &s.data.cam_r, &m.left, delta).is_some());
            let back = warp_checked(&s.data.wpm_r, &s.data.wpm_l, &s.data.cam_l, &gt.grid.center(m.j), delta).unwrap();
            assert_eq!(gt.grid.cell_of(&back), Some(m.i));
            assert_eq!(gt.grid.cell_of(&m.right), Some(m.j));
        }
        let f = affine_fundamental_from_cameras(&s.data.cam_l, &s.data.cam_r).unwrap();
        let rep = epipolar_consistency_report(&gt, &f).unwrap();
        assert!(rep.max < 1e-6, "{rep:?}");
        let scaled = epipolar_consistency_report(&gt, &f.scaled(-3.5)).unwrap();
        assert!((scaled.max - rep.max).abs() < 1e-12 && (scaled.mean - rep.mean).abs() < 1e-12);
    }

    #[test]
    fn ray_cast_hits_the_plane_exactly() {
        let s = generate_scene(&translated([0.0, 0.0])).unwrap();
        let x = cast_ray(&s.data.cam_l, &s.terrain, &Pixel::new(10.5, 3.5)).unwrap();
        assert!((x.z - s.cfg.base_height).abs() < 1e-12);
    }
}

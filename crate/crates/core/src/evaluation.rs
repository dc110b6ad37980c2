//! Match precision, pose error from epipolar line directions, pose AUC and
//! inverse-count bin aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{affine_fundamental_from_cameras, affine_fundamental_from_matches, AffineFundamental, RansacConfig};
use crate::groundtruth::{view_vector, warp_gt, SceneData, SyntheticScene, ViewAngles};
use crate::matcher::{FineMatch, FineMatchSet, Matcher, MatcherError};
use crate::Pixel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("epipolar line direction has zero length")]
    DegenerateDirection,
    #[error("error values must be finite and non-negative, got {0}")]
    InvalidError(f64),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// `(left, right, confidence)` for precision and top-K selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub left: Pixel,
    pub right: Pixel,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    /// Threshold in pixels (as a string key for JSON) to fraction of true positives.
    pub at: BTreeMap<String, f64>,
    /// True positives at each threshold, same keys.
    pub true_positives: BTreeMap<String, usize>,
    /// Matches whose left pixel has ground truth.
    pub evaluated: usize,
    pub total: usize,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// A match is a true positive at `t` when its left pixel has ground truth
/// and `‖ĵ - warp(î)‖ ≤ t`. Returns `None` when no match has ground truth.
pub fn match_precision(
    matches: &[ScoredMatch],
    warp: impl Fn(&Pixel) -> Option<Pixel>,
    thresholds: &[f64],
) -> Option<Precision> {
    let errs: Vec<f64> = matches.iter().filter_map(|m| warp(&m.left).map(|g| m.right.distance(&g))).collect();
    if errs.is_empty() {
        return None;
    }
    let mut at = BTreeMap::new();
    let mut true_positives = BTreeMap::new();
    for &t in thresholds {
        let tp = errs.iter().filter(|&&e| e <= t).count();
        at.insert(threshold_key(t), tp as f64 / errs.len() as f64);
        true_positives.insert(threshold_key(t), tp);
    }
    Some(Precision { at, true_positives, evaluated: errs.len(), total: matches.len() })
}

impl From<&FineMatch> for ScoredMatch {
    fn from(m: &FineMatch) -> Self {
        Self { left: m.left, right: m.right, confidence: m.confidence }
    }
}

/// Precision of matches against the world-point warp of `scene`.
pub fn scene_precision(matches: &[ScoredMatch], scene: &SceneData, delta_3d: f64, thresholds: &[f64]) -> Option<Precision> {
    match_precision(matches, |px| warp_gt(scene, px, delta_3d), thresholds)
}

/// Indices of the `k` most confident matches; ties keep the lower index.
pub fn top_k(confidences: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confidences.len()).collect();
    idx.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn line_angle(a: [f64; 2], b: [f64; 2]) -> Result<f64, EvalError> {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if !(na > 0.0 && nb > 0.0) {
        return Err(EvalError::DegenerateDirection);
    }
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    Ok(cross.abs().atan2(dot.abs()).to_degrees())
}

/// Mean over both images of the angle between estimated and true epipolar
/// line families, in `[0, 90]` degrees. Lines are compared through their
/// normals, which is equivalent for directions.
pub fn pose_error(est: &AffineFundamental, gt: &AffineFundamental) -> Result<f64, EvalError> {
    let right = line_angle(est.right_normal(), gt.right_normal())?;
    let left = line_angle(est.left_normal(), gt.left_normal())?;
    Ok(0.5 * (right + left))
}

/// `100 / t · ∫₀ᵗ cdf(x) dx` of the empirical error distribution: trapezoid
/// rule over the sorted error knots up to `t`, then flat to `t`. `None` for
/// an empty list.
pub fn auc_at(errors: &[f64], thresholds: &[f64]) -> Result<Option<Vec<f64>>, EvalError> {
    if let Some(&bad) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(EvalError::InvalidError(bad));
    }
    if errors.is_empty() {
        return Ok(None);
    }
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    // cdf knots: (e_k, (k+1)/n), starting from (0, fraction of exact zeros).
    let zeros = e.iter().filter(|&&v| v == 0.0).count();
    let mut xs = vec![0.0];
    let mut ys = vec![zeros as f64 / n];
    for (k, &v) in e.iter().enumerate().skip(zeros) {
        xs.push(v);
        ys.push((k + 1) as f64 / n);
    }
    let out = thresholds
        .iter()
        .map(|&t| {
            let mut area = 0.0;
            let mut last = 0;
            for k in 1..xs.len() {
                if xs[k] > t {
                    break;
                }
                area += 0.5 * (ys[k - 1] + ys[k]) * (xs[k] - xs[k - 1]);
                last = k;
            }
            area += ys[last] * (t - xs[last]);
            100.0 * area / t
        })
        .collect();
    Ok(Some(out))
}

/// Angle between the two viewing directions, degrees.
pub fn view_angle_diff(l: &ViewAngles, r: &ViewAngles) -> f64 {
    let (a, b) = (view_vector(l), view_vector(r));
    a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
}

/// Absolute track angle difference folded to `[0, 180]`.
pub fn track_angle_diff(l: &ViewAngles, r: &ViewAngles) -> f64 {
    let d = (l.track - r.track).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// One evaluated pair with its angular bin labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub view_angle_diff: f64,
    pub track_angle_diff: f64,
    pub precision_at_1: Option<f64>,
    pub n_matches: usize,
    pub n_true_positive: usize,
    pub pose_error_deg: Option<f64>,
}

/// Bin index along one angle axis.
pub fn bin_of(angle: f64, width: f64) -> i64 {
    (angle / width).floor() as i64
}

/// Mean of per-bin means over non-empty bins, for every metric `value` yields.
/// `None` values are skipped; a bin with no values for a metric is skipped too.
pub fn weighted_aggregate<T>(items: &[T], bin: impl Fn(&T) -> (i64, i64), value: impl Fn(&T) -> Option<f64>) -> Option<f64> {
    let mut bins: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for it in items {
        if let Some(v) = value(it) {
            let e = bins.entry(bin(it)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    if bins.is_empty() {
        return None;
    }
    Some(bins.values().map(|(s, n)| s / *n as f64).sum::<f64>() / bins.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub top_k: usize,
    pub delta_3d: f64,
    pub thresholds: Vec<f64>,
    pub ransac: RansacConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { top_k: 2000, delta_3d: 0.5, thresholds: vec![1.0, 3.0, 5.0], ransac: RansacConfig::default() }
    }
}

/// Metrics of already computed matches on a scene with known cameras.
pub fn evaluate_matches(
    pair_id: &str,
    matches: &[ScoredMatch],
    data: &SceneData,
    views: (&ViewAngles, &ViewAngles),
    opts: &EvalOptions,
) -> Result<(PairMetrics, Option<Precision>), EvalError> {
    let prec = scene_precision(matches, data, opts.delta_3d, &opts.thresholds);
    let pose = if matches.len() >= 4 {
        let pts: Vec<_> = matches.iter().map(|m| (m.left, m.right)).collect();
        let f_gt = affine_fundamental_from_cameras(&data.cam_l, &data.cam_r)?;
        match affine_fundamental_from_matches(&pts, &opts.ransac) {
            Ok(fit) => Some(pose_error(&fit.f, &f_gt)?),
            Err(_) => None,
        }
    } else {
        None
    };
    let key = threshold_key(1.0);
    let metrics = PairMetrics {
        pair_id: pair_id.to_string(),
        view_angle_diff: view_angle_diff(views.0, views.1),
        track_angle_diff: track_angle_diff(views.0, views.1),
        precision_at_1: prec.as_ref().and_then(|p| p.at.get(&key).copied()),
        n_matches: matches.len(),
        n_true_positive: prec.as_ref().and_then(|p| p.true_positives.get(&key).copied()).unwrap_or(0),
        pose_error_deg: pose,
    };
    Ok((metrics, prec))
}

/// The `k` most confident fine matches of a match set, in rank order.
pub fn top_k_matches(set: &FineMatchSet, k: usize) -> Vec<FineMatch> {
    let conf: Vec<f64> = set.matches.iter().map(|m| m.confidence).collect();
    top_k(&conf, k).into_iter().map(|i| set.matches[i]).collect()
}

/// Match a scene with the epipolar masks of its cameras, keep the `top_k`
/// most confident fine matches and score them.
pub fn evaluate_scene(
    matcher: &Matcher,
    pair_id: &str,
    data: &SceneData,
    views: (&ViewAngles, &ViewAngles),
    opts: &EvalOptions,
) -> Result<(Vec<FineMatch>, PairMetrics, Option<Precision>), EvalError> {
    let (il, ir) = data.images_f64();
    let f0 = affine_fundamental_from_cameras(&data.cam_l, &data.cam_r)?;
    let out = matcher.forward(&il, &ir, Some(&f0), matcher.cfg.n_m)?;
    let kept = top_k_matches(&out.fine, opts.top_k);
    let scored: Vec<ScoredMatch> = kept.iter().map(ScoredMatch::from).collect();
    let (metrics, prec) = evaluate_matches(pair_id, &scored, data, views, opts)?;
    Ok((kept, metrics, prec))
}

/// [`evaluate_scene`] on a generated scene, labelled with its configured views.
pub fn evaluate_synthetic(
    matcher: &Matcher,
    pair_id: &str,
    scene: &SyntheticScene,
    opts: &EvalOptions,
) -> Result<(Vec<FineMatch>, PairMetrics, Option<Precision>), EvalError> {
    evaluate_scene(matcher, pair_id, &scene.data, (&scene.cfg.left_view, &scene.cfg.right_view), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision_at_1: Option<f64>,
    pub n_true_positive: Option<f64>,
    pub pose_error_deg: Option<f64>,
    /// AUC at 5, 10 and 20 degrees over the per-pair pose errors.
    pub pose_auc: Option<Vec<f64>>,
    pub pairs: usize,
}

pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// Inverse-count weighted aggregate over `bin_width`-degree bins of view and
/// track angle differences.
pub fn aggregate(pairs: &[PairMetrics], bin_width: f64) -> Aggregate {
    let bin = |m: &PairMetrics| (bin_of(m.view_angle_diff, bin_width), bin_of(m.track_angle_diff, bin_width));
    let errs: Vec<f64> = pairs.iter().filter_map(|m| m.pose_error_deg).collect();
    Aggregate {
        precision_at_1: weighted_aggregate(pairs, bin, |m| m.precision_at_1),
        n_true_positive: weighted_aggregate(pairs, bin, |m| Some(m.n_true_positive as f64)),
        pose_error_deg: weighted_aggregate(pairs, bin, |m| m.pose_error_deg),
        pose_auc: auc_at(&errs, &AUC_THRESHOLDS).ok().flatten(),
        pairs: pairs.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shift_warp(p: &Pixel) -> Option<Pixel> {
        Some(Pixel::new(p.row + 1.0, p.col))
    }

    #[test]
    fn precision_fixture() {
        let mut ms = vec![];
        for k in 0..10 {
            let l = Pixel::new(k as f64, 0.0);
            let g = shift_warp(&l).unwrap();
            let err = if k < 7 { 0.5 } else { 2.0 };
            ms.push(ScoredMatch { left: l, right: Pixel::new(g.row, g.col + err), confidence: 1.0 });
        }
        let p = match_precision(&ms, shift_warp, &[1.0, 3.0]).unwrap();
        assert_eq!(p.at["1"], 0.7);
        assert_eq!(p.at["3"], 1.0);
        assert_eq!(p.true_positives["1"], 7);
        let exact: Vec<ScoredMatch> =
            (0..4).map(|k| ScoredMatch { left: Pixel::new(0.0, k as f64), right: Pixel::new(1.0, k as f64), confidence: 0.5 }).collect();
        assert!(match_precision(&exact, shift_warp, &[0.5, 1.0]).unwrap().at.values().all(|&v| v == 1.0));
        assert!(match_precision(&[], shift_warp, &[1.0]).is_none());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.5, 0.3, 0.2, 0.9], 2000).len(), 5);
        assert!(top_k(&[0.1, 0.2], 0).is_empty());
        assert_eq!(top_k(&[0.5, 0.7, 0.5, 0.5], 3), vec![1, 0, 2]);
    }

    proptest! {
        #[test]
        fn top_k_matches_stable_sort(seed in 0u64..300, k in 0usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..10).map(|_| (rng.gen_range(0..4) as f64) * 0.25).collect();
            let mut oracle: Vec<usize> = (0..10).collect();
            // Stable sort by descending confidence keeps index order among ties.
            oracle.sort_by(|&a, &b| c[b].partial_cmp(&c[a]).unwrap());
            oracle.truncate(k);
            prop_assert_eq!(top_k(&c, k), oracle);
        }

        #[test]
        fn precision_is_monotone(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ms: Vec<ScoredMatch> = (0..20).map(|k| ScoredMatch {
                left: Pixel::new(k as f64, 0.0),
                right: Pixel::new(k as f64 + 1.0 + rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
                confidence: 1.0,
            }).collect();
            let ts = [0.5, 1.0, 2.0, 3.0, 5.0];
            let p = match_precision(&ms, shift_warp, &ts).unwrap();
            let v: Vec<f64> = ts.iter().map(|t| p.at[&threshold_key(*t)]).collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn auc_is_permutation_invariant_and_monotone(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..30.0)).collect();
            let mut shuffled = e.clone();
            shuffled.reverse();
            let a = auc_at(&e, &AUC_THRESHOLDS).unwrap().unwrap();
            prop_assert_eq!(a.clone(), auc_at(&shuffled, &AUC_THRESHOLDS).unwrap().unwrap());
            let better: Vec<f64> = e.iter().map(|v| v * 0.7).collect();
            let b = auc_at(&better, &AUC_THRESHOLDS).unwrap().unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn aggregate_matches_inverse_count_weights(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items: Vec<(i64, f64)> = (0..40).map(|_| (rng.gen_range(0..5), rng.gen_range(0.0..1.0))).collect();
            let got = weighted_aggregate(&items, |t| (t.0, 0), |t| Some(t.1)).unwrap();
            let mut counts = BTreeMap::new();
            for (b, _) in &items {
                *counts.entry(*b).or_insert(0usize) += 1;
            }
            let nb = counts.len() as f64;
            let brute: f64 = items.iter().map(|(b, v)| v / (counts[b] as f64 * nb)).sum();
            prop_assert!((got - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_at(&[0.0, 0.0], &AUC_THRESHOLDS).unwrap().unwrap(), vec![100.0; 3]);
        assert_eq!(auc_at(&[25.0, 30.0], &AUC_THRESHOLDS).unwrap().unwrap(), vec![0.0; 3]);
        assert_eq!(auc_at(&[0.0, 10.0], &[10.0]).unwrap().unwrap(), vec![75.0]);
        assert_eq!(auc_at(&[], &[10.0]).unwrap(), None);
        assert!(auc_at(&[-1.0], &[10.0]).is_err());
    }

    fn f_from_normals(r: [f64; 2], l: [f64; 2]) -> AffineFundamental {
        AffineFundamental::from_matrix(Matrix3::new(0.0, 0.0, r[0], 0.0, 0.0, r[1], l[0], l[1], 0.3)).unwrap()
    }

    #[test]
    fn pose_error_examples() {
        let f = f_from_normals([0.3, 0.8], [-0.5, 0.2]);
        assert_eq!(pose_error(&f, &f).unwrap(), 0.0);
        assert!(pose_error(&f.scaled(-2.5), &f).unwrap() < 1e-12);
        let rot = |v: [f64; 2], deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            [c * v[0] - s * v[1], s * v[0] + c * v[1]]
        };
        let g = f_from_normals(rot([0.3, 0.8], 5.0), rot([-0.5, 0.2], 5.0));
        assert!((pose_error(&g, &f).unwrap() - 5.0).abs() < 1e-9);
        assert!((pose_error(&f, &g).unwrap() - pose_error(&g, &f).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn angle_labels() {
        let a = ViewAngles { off_nadir: 10.0, azimuth: 90.0, track: 350.0 };
        let b = ViewAngles { off_nadir: 10.0, azimuth: 270.0, track: 20.0 };
        assert!((view_angle_diff(&a, &b) - 20.0).abs() < 1e-9);
        assert!((track_angle_diff(&a, &b) - 30.0).abs() < 1e-12);
        assert_eq!(view_angle_diff(&a, &a), 0.0);
        assert_eq!(bin_of(19.9, 10.0), 1);
    }

    #[test]
    fn aggregate_examples() {
        let one: Vec<(i64, f64)> = vec![(0, 1.0), (0, 2.0), (0, 6.0)];
        assert_eq!(weighted_aggregate(&one, |t| (t.0, 0), |t| Some(t.1)), Some(3.0));
        let mut two: Vec<(i64, f64)> = vec![(0, 1.0)];
        two.extend(std::iter::repeat((1, 0.0)).take(99));
        assert_eq!(weighted_aggregate(&two, |t| (t.0, 0), |t| Some(t.1)), Some(0.5));
        let mut rev = two.clone();
        rev.reverse();
        assert_eq!(weighted_aggregate(&rev, |t| (t.0, 0), |t| Some(t.1)), Some(0.5));
    }
}

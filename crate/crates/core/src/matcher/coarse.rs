use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::transformer::{AttnLayer, LayerCache};
use crate::nn::{NnError, MASK_NEG};

/// Per-layer caches of [`coarse_transform`], in execution order.
#[derive(Debug, Clone)]
pub struct CoarseTransformCache {
    pub(crate) layers: Vec<[LayerCache; 4]>,
}

/// `N_c` rounds of: linear self-attention on each side, masked cross-attention
/// L <- R with `masks[l]`, then R <- L with its transpose. Both directions share
/// the layer weights. `None` masks run the cross-attention unmasked.
pub fn coarse_transform(
    self_layers: &[AttnLayer],
    cross_layers: &[AttnLayer],
    fl: &Array2<f64>,
    fr: &Array2<f64>,
    masks: &[Option<Array2<bool>>],
) -> Result<(Array2<f64>, Array2<f64>, CoarseTransformCache), NnError> {
    if self_layers.len() != cross_layers.len() || masks.len() != self_layers.len() {
        return Err(NnError::Shape(format!(
            "{} self layers, {} cross layers, {} masks",
            self_layers.len(),
            cross_layers.len(),
            masks.len()
        )));
    }
    let (mut l, mut r) = (fl.clone(), fr.clone());
    let mut caches = Vec::with_capacity(self_layers.len());
    for ((sl, cl), mask) in self_layers.iter().zip(cross_layers).zip(masks) {
        let (l1, ca) = sl.forward(&l, &l, None, None)?;
        let (r1, cb) = sl.forward(&r, &r, None, None)?;
        let (l2, cc) = cl.forward(&l1, &r1, mask.as_ref(), None)?;
        let mask_t = mask.as_ref().map(|m| m.t().to_owned());
        let (r2, cd) = cl.forward(&r1, &l2, mask_t.as_ref(), None)?;
        caches.push([ca, cb, cc, cd]);
        l = l2;
        r = r2;
    }
    Ok((l, r, CoarseTransformCache { layers: caches }))
}

/// Returns `(d fl, d fr)` and accumulates layer gradients.
pub fn coarse_transform_backward(
    self_layers: &[AttnLayer],
    cross_layers: &[AttnLayer],
    cache: &CoarseTransformCache,
    dl: &Array2<f64>,
    dr: &Array2<f64>,
    g_self: &mut [AttnLayer],
    g_cross: &mut [AttnLayer],
) -> (Array2<f64>, Array2<f64>) {
    let (mut dl, mut dr) = (dl.clone(), dr.clone());
    for (k, [ca, cb, cc, cd]) in cache.layers.iter().enumerate().rev() {
        let (dr1_a, dl2_b) = cross_layers[k].backward(cd, &dr, &mut g_cross[k]);
        dl += &dl2_b;
        let (dl1, dr1_b) = cross_layers[k].backward(cc, &dl, &mut g_cross[k]);
        let dr1 = dr1_a + dr1_b;
        let (x, s) = self_layers[k].backward(cb, &dr1, &mut g_self[k]);
        dr = x + s;
        let (x, s) = self_layers[k].backward(ca, &dl1, &mut g_self[k]);
        dl = x + s;
    }
    (dl, dr)
}

/// Softmax along rows; rows without an admissible entry become all zero.
fn softmax_rows_allow_empty(scores: &Array2<f64>, mask: Option<&Array2<bool>>) -> Array2<f64> {
    let mut out = scores.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mrow = mask.map(|m| m.row(i));
        if let Some(mr) = &mrow {
            if !mr.iter().any(|&v| v) {
                row.fill(0.0);
                continue;
            }
            for (v, &ok) in row.iter_mut().zip(mr.iter()) {
                if !ok {
                    *v += MASK_NEG;
                }
            }
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        if let Some(mr) = &mrow {
            for (v, &ok) in row.iter_mut().zip(mr.iter()) {
                if !ok {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DualSoftmaxCache {
    fl: Array2<f64>,
    fr: Array2<f64>,
    scale: f64,
    row: Array2<f64>,
    col: Array2<f64>,
}

/// `P = softmax_j(S) ⊙ softmax_i(S)` with `S = ⟨f_L/√d, f_R/√d⟩ / τ`.
/// Inadmissible entries are exactly zero, as are fully masked rows and columns.
pub fn masked_dual_softmax(
    fl: &Array2<f64>,
    fr: &Array2<f64>,
    mask: Option<&Array2<bool>>,
    tau: f64,
) -> Result<(Array2<f64>, DualSoftmaxCache), NnError> {
    if fl.ncols() != fr.ncols() {
        return Err(NnError::Shape(format!("feature widths {} and {}", fl.ncols(), fr.ncols())));
    }
    if let Some(m) = mask {
        if m.dim() != (fl.nrows(), fr.nrows()) {
            return Err(NnError::Shape(format!("mask {:?} for {} x {} cells", m.dim(), fl.nrows(), fr.nrows())));
        }
    }
    let scale = 1.0 / (fl.ncols() as f64 * tau);
    let s = fl.dot(&fr.t()) * scale;
    let row = softmax_rows_allow_empty(&s, mask);
    let mask_t = mask.map(|m| m.t().to_owned());
    let col = softmax_rows_allow_empty(&s.t().to_owned(), mask_t.as_ref()).reversed_axes();
    let p = &row * &col;
    Ok((p, DualSoftmaxCache { fl: fl.clone(), fr: fr.clone(), scale, row, col }))
}

/// Gradients of the features given `dP`.
pub fn dual_softmax_backward(c: &DualSoftmaxCache, dp: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let da = dp * &c.col;
    let db = dp * &c.row;
    let ra = (&da * &c.row).sum_axis(Axis(1)).insert_axis(Axis(1));
    let cb = (&db * &c.col).sum_axis(Axis(0)).insert_axis(Axis(0));
    let ds = &c.row * &(&da - &ra) + &c.col * &(&db - &cb);
    let ds = ds * c.scale;
    (ds.dot(&c.fr), ds.t().dot(&c.fl))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    /// Flat left coarse index.
    pub i: usize,
    /// Flat right coarse index.
    pub j: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatchSet {
    pub matches: Vec<CoarseMatch>,
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

fn argmax_first(it: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in it.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Mutual nearest neighbours of `p` with confidence at least `delta_c`.
/// Ties resolve to the lowest index. Output is sorted by `i`.
pub fn select_coarse_matches(p: &Array2<f64>, delta_c: f64) -> CoarseMatchSet {
    let col_best: Vec<usize> = p.columns().into_iter().map(|c| argmax_first(c.iter().copied()).0).collect();
    let mut matches = Vec::new();
    for (i, row) in p.rows().into_iter().enumerate() {
        let (j, v) = argmax_first(row.iter().copied());
        if row.is_empty() || col_best[j] != i || !(v >= delta_c) {
            continue;
        }
        matches.push(CoarseMatch { i, j, confidence: v });
    }
    CoarseMatchSet { matches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::transformer::AttentionKind;
    use crate::nn::{assign, flatten, gradcheck, zeros_like};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn oracle_dual(s: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
        let (n, m) = s.dim();
        let mut p = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                if !mask[(i, j)] {
                    continue;
                }
                let zr: f64 = (0..m).filter(|&k| mask[(i, k)]).map(|k| (s[(i, k)] - s[(i, j)]).exp()).sum();
                let zc: f64 = (0..n).filter(|&k| mask[(k, j)]).map(|k| (s[(k, j)] - s[(i, j)]).exp()).sum();
                p[(i, j)] = 1.0 / zr / zc;
            }
        }
        p
    }

    #[test]
    fn saturation_gives_identity() {
        let s: f64 = 200.0;
        // Features whose scaled inner products are [[s, 0], [0, s]] with d = 1, tau = 1.
        let fl = ndarray::arr2(&[[s.sqrt(), 0.0], [0.0, s.sqrt()]]) * 2f64.sqrt();
        let (p, _) = masked_dual_softmax(&fl, &fl, None, 1.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((p[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force_and_zeros_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fl = rand_mat(6, 6, &mut rng);
        let fr = rand_mat(6, 6, &mut rng);
        let mut mask = Array2::from_shape_fn((6, 6), |_| rng.gen_bool(0.6));
        mask.row_mut(3).fill(false);
        let tau = 0.1;
        let (p, _) = masked_dual_softmax(&fl, &fr, Some(&mask), tau).unwrap();
        let s = fl.dot(&fr.t()) / (6.0 * tau);
        let o = oracle_dual(&s, &mask);
        for ((a, b), &ok) in p.iter().zip(o.iter()).zip(mask.iter()) {
            assert!((a - b).abs() < 1e-12);
            if !ok {
                assert_eq!(*a, 0.0);
            }
        }
        assert!(p.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fl = rand_mat(5, 4, &mut rng);
        let fr = rand_mat(6, 4, &mut rng);
        let mut mask = Array2::from_shape_fn((5, 6), |_| rng.gen_bool(0.6));
        mask.row_mut(1).fill(false);
        let r = rand_mat(5, 6, &mut rng);
        let (_, cache) = masked_dual_softmax(&fl, &fr, Some(&mask), 0.5).unwrap();
        let (dfl, dfr) = dual_softmax_backward(&cache, &r);
        let mut x: Vec<f64> = fl.iter().copied().collect();
        x.extend(fr.iter().copied());
        let mut g: Vec<f64> = dfl.iter().copied().collect();
        g.extend(dfr.iter().copied());
        let rep = gradcheck(
            |t| {
                let a = Array2::from_shape_vec((5, 4), t[..20].to_vec()).unwrap();
                let b = Array2::from_shape_vec((6, 4), t[20..].to_vec()).unwrap();
                (masked_dual_softmax(&a, &b, Some(&mask), 0.5).unwrap().0 * &r).sum()
            },
            &x,
            &g,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn selection_examples() {
        let mut p = Array2::from_elem((4, 4), 0.02);
        for k in 0..4 {
            p[(k, k)] = 0.9;
        }
        let set = select_coarse_matches(&p, 0.3);
        assert_eq!(set.matches.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        p[(2, 2)] = 0.25;
        let set = select_coarse_matches(&p, 0.3);
        assert_eq!(set.matches.iter().map(|m| m.i).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn ties_take_lowest_index() {
        let p = Array2::from_elem((3, 3), 0.5);
        let set = select_coarse_matches(&p, 0.3);
        assert_eq!(set.matches, vec![CoarseMatch { i: 0, j: 0, confidence: 0.5 }]);
    }

    fn oracle_mnn(p: &Array2<f64>, delta: f64) -> Vec<(usize, usize)> {
        let (n, m) = p.dim();
        let mut out = vec![];
        for i in 0..n {
            for j in 0..m {
                let row_max = (0..m).all(|k| p[(i, k)] < p[(i, j)] || (p[(i, k)] == p[(i, j)] && k >= j));
                let col_max = (0..n).all(|k| p[(k, j)] < p[(i, j)] || (p[(k, j)] == p[(i, j)] && k >= i));
                if row_max && col_max && p[(i, j)] >= delta {
                    out.push((i, j));
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn selection_matches_oracle(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0.0..1.0));
            let got: Vec<(usize, usize)> = select_coarse_matches(&p, 0.3).matches.iter().map(|m| (m.i, m.j)).collect();
            prop_assert_eq!(got, oracle_mnn(&p, 0.3));
        }

        #[test]
        fn probabilities_are_subprobabilities(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fl = rand_mat(7, 4, &mut rng);
            let fr = rand_mat(5, 4, &mut rng);
            let mask = Array2::from_shape_fn((7, 5), |_| rng.gen_bool(0.5));
            let (p, _) = masked_dual_softmax(&fl, &fr, Some(&mask), 0.2).unwrap();
            for (&v, &ok) in p.iter().zip(mask.iter()) {
                prop_assert!((0.0..=1.0).contains(&v));
                if !ok { prop_assert_eq!(v, 0.0); }
            }
            for row in p.rows() {
                prop_assert!(row.sum() <= 1.0 + 1e-12);
            }
            for col in p.columns() {
                prop_assert!(col.sum() <= 1.0 + 1e-12);
            }
        }
    }

    fn stack(n_c: usize, d: usize, rng: &mut impl Rng) -> (Vec<AttnLayer>, Vec<AttnLayer>) {
        let s = (0..n_c).map(|_| AttnLayer::init(d, 2, AttentionKind::Linear, rng)).collect();
        let c = (0..n_c).map(|_| AttnLayer::init(d, 2, AttentionKind::Full, rng)).collect();
        (s, c)
    }

    #[test]
    fn masks_change_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (s, c) = stack(2, 8, &mut rng);
        let fl = rand_mat(9, 8, &mut rng);
        let fr = rand_mat(9, 8, &mut rng);
        let mask = Array2::from_shape_fn((9, 9), |(i, j)| (i as i64 - j as i64).abs() <= 1);
        let (a, _, _) = coarse_transform(&s, &c, &fl, &fr, &[None, None]).unwrap();
        let (b, _, _) = coarse_transform(&s, &c, &fl, &fr, &[Some(mask.clone()), Some(mask)]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn full_coarse_layer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (s, c) = stack(1, 8, &mut rng);
        let fl = rand_mat(6, 8, &mut rng);
        let fr = rand_mat(7, 8, &mut rng);
        let mut mask = Array2::from_shape_fn((6, 7), |_| rng.gen_bool(0.5));
        mask.column_mut(0).fill(true);
        mask.row_mut(0).fill(true);
        let masks = vec![Some(mask)];
        let rl = rand_mat(6, 8, &mut rng);
        let rr = rand_mat(7, 8, &mut rng);
        let (_, _, cache) = coarse_transform(&s, &c, &fl, &fr, &masks).unwrap();
        let mut gs = vec![zeros_like(&s[0])];
        let mut gc = vec![zeros_like(&c[0])];
        let (dfl, dfr) = coarse_transform_backward(&s, &c, &cache, &rl, &rr, &mut gs, &mut gc);
        let loss = |s: &[AttnLayer], c: &[AttnLayer], fl: &Array2<f64>, fr: &Array2<f64>| {
            let (a, b, _) = coarse_transform(s, c, fl, fr, &masks).unwrap();
            (a * &rl).sum() + (b * &rr).sum()
        };
        let mut theta = flatten(&s[0]);
        theta.extend(flatten(&c[0]));
        let ns = theta.len() - flatten(&c[0]).len();
        let mut g = flatten(&gs[0]);
        g.extend(flatten(&gc[0]));
        let rep = gradcheck(
            |t| {
                let mut s2 = s.clone();
                let mut c2 = c.clone();
                assign(&mut s2[0], &t[..ns]);
                assign(&mut c2[0], &t[ns..]);
                loss(&s2, &c2, &fl, &fr)
            },
            &theta,
            &g,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "params {rep:?}");
        let mut x: Vec<f64> = fl.iter().copied().collect();
        x.extend(fr.iter().copied());
        let mut gx: Vec<f64> = dfl.iter().copied().collect();
        gx.extend(dfr.iter().copied());
        let rep = gradcheck(
            |t| {
                let a = Array2::from_shape_vec((6, 8), t[..48].to_vec()).unwrap();
                let b = Array2::from_shape_vec((7, 8), t[48..].to_vec()).unwrap();
                loss(&s, &c, &a, &b)
            },
            &x,
            &gx,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "inputs {rep:?}");
    }
}

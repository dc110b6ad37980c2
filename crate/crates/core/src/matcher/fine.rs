use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{AttentionKind, AttnLayer, LayerCache};
use super::MatcherConfig;
use crate::nn::{impl_params_for_fields, FeatureSeq, Linear, NnError};
use crate::Pixel;

/// Merge of fine window tokens with their seed's coarse feature, followed by
/// one linear self-attention and one linear cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FineModule {
    pub merge: Linear,
    pub layers: Vec<AttnLayer>,
}

impl_params_for_fields!(FineModule { merge, layers });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineMatch {
    /// Coarse seed indices.
    pub coarse_i: usize,
    pub coarse_j: usize,
    /// Left fine-window center.
    pub left: Pixel,
    /// Sub-pixel expectation in the right window.
    pub right: Pixel,
    pub confidence: f64,
    /// Trace of the covariance of the window distribution.
    pub sigma2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FineMatchSet {
    pub matches: Vec<FineMatch>,
    /// Seeds whose windows did not fit inside the fine grid.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct FineCache {
    /// Positions of the kept seeds in the input list.
    pub kept: Vec<usize>,
    ww: usize,
    rows_l: Vec<usize>,
    rows_r: Vec<usize>,
    seeds_l: Vec<usize>,
    seeds_r: Vec<usize>,
    cat_l: Array2<f64>,
    cat_r: Array2<f64>,
    layer_caches: Vec<LayerCache>,
    l_out: Array2<f64>,
    r_out: Array2<f64>,
    probs: Vec<Array1<f64>>,
    coords: Vec<Vec<Pixel>>,
    /// Pixel bounds `(row_min, row_max, col_min, col_max)` of each right window.
    pub bounds: Vec<[f64; 4]>,
}

/// `(Σ p_k x_k, Σ p_k ‖x_k - mean‖²)`.
pub fn expectation(probs: &[f64], coords: &[Pixel]) -> (Pixel, f64) {
    let (mut r, mut c) = (0.0, 0.0);
    for (p, x) in probs.iter().zip(coords) {
        r += p * x.row;
        c += p * x.col;
    }
    let var = probs.iter().zip(coords).map(|(p, x)| p * ((x.row - r).powi(2) + (x.col - c).powi(2))).sum();
    (Pixel::new(r, c), var)
}

fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

impl FineModule {
    pub fn init(cfg: &MatcherConfig, rng: &mut impl Rng) -> Self {
        Self {
            merge: Linear::init(cfg.d_f, cfg.d_f + cfg.d_c, true, rng),
            layers: vec![
                AttnLayer::init(cfg.d_f, cfg.n_h, AttentionKind::Linear, rng),
                AttnLayer::init(cfg.d_f, cfg.n_h, AttentionKind::Linear, rng),
            ],
        }
    }

    /// Fine cell index of the window center for coarse cell `k`.
    fn center_cell(cfg: &MatcherConfig, k: usize) -> (usize, usize) {
        let side = cfg.coarse_side();
        let s = cfg.r_c / cfg.r_f;
        ((k / side) * s + s / 2, (k % side) * s + s / 2)
    }

    /// Continuous pixel coordinate of the center of fine cell `(r, c)`.
    pub fn cell_center(cfg: &MatcherConfig, r: usize, c: usize) -> Pixel {
        let f = cfg.r_f as f64;
        Pixel::new((r as f64 + 0.5) * f, (c as f64 + 0.5) * f)
    }

    /// Pixel position of the left window center seeded by coarse cell `i`.
    pub fn left_center(cfg: &MatcherConfig, i: usize) -> Pixel {
        let (r, c) = Self::center_cell(cfg, i);
        Self::cell_center(cfg, r, c)
    }

    fn window_rows(cfg: &MatcherConfig, k: usize) -> Option<Vec<usize>> {
        let n = cfg.fine_side();
        let half = cfg.w / 2;
        let (r, c) = Self::center_cell(cfg, k);
        if r < half || c < half || r + half >= n || c + half >= n {
            return None;
        }
        let mut rows = Vec::with_capacity(cfg.w * cfg.w);
        for dr in 0..cfg.w {
            for dc in 0..cfg.w {
                rows.push((r + dr - half) * n + (c + dc - half));
            }
        }
        Some(rows)
    }

    /// Refine each coarse seed `(i, j, confidence)`.
    pub fn forward(
        &self,
        cfg: &MatcherConfig,
        fine_l: &FeatureSeq,
        fine_r: &FeatureSeq,
        coarse_l: &Array2<f64>,
        coarse_r: &Array2<f64>,
        seeds: &[(usize, usize, f64)],
    ) -> Result<(FineMatchSet, FineCache), NnError> {
        let ww = cfg.w * cfg.w;
        let (mut kept, mut rows_l, mut rows_r, mut seeds_l, mut seeds_r) = (vec![], vec![], vec![], vec![], vec![]);
        let mut coords = vec![];
        let mut bounds = vec![];
        for (n, &(i, j, _)) in seeds.iter().enumerate() {
            let (Some(wl), Some(wr)) = (Self::window_rows(cfg, i), Self::window_rows(cfg, j)) else {
                continue;
            };
            kept.push(n);
            rows_l.extend(wl);
            let side = cfg.fine_side();
            let cs: Vec<Pixel> = wr.iter().map(|&k| Self::cell_center(cfg, k / side, k % side)).collect();
            bounds.push([cs[0].row, cs[ww - 1].row, cs[0].col, cs[ww - 1].col]);
            coords.push(cs);
            rows_r.extend(wr);
            seeds_l.push(i);
            seeds_r.push(j);
        }
        let dropped = seeds.len() - kept.len();
        let d_f = fine_l.dim();
        if kept.is_empty() {
            let cache = FineCache {
                kept,
                ww,
                rows_l,
                rows_r,
                seeds_l,
                seeds_r,
                cat_l: Array2::zeros((0, d_f + coarse_l.ncols())),
                cat_r: Array2::zeros((0, d_f + coarse_l.ncols())),
                layer_caches: vec![],
                l_out: Array2::zeros((0, d_f)),
                r_out: Array2::zeros((0, d_f)),
                probs: vec![],
                coords,
                bounds,
            };
            return Ok((FineMatchSet { matches: vec![], dropped }, cache));
        }
        let gather = |fine: &FeatureSeq, coarse: &Array2<f64>, rows: &[usize], seeds: &[usize]| {
            let f = fine.data.select(Axis(0), rows);
            let crow: Vec<usize> = seeds.iter().flat_map(|&k| std::iter::repeat(k).take(ww)).collect();
            let c = coarse.select(Axis(0), &crow);
            concatenate![Axis(1), f, c]
        };
        let cat_l = gather(fine_l, coarse_l, &rows_l, &seeds_l);
        let cat_r = gather(fine_r, coarse_r, &rows_r, &seeds_r);
        let l0 = self.merge.forward(&cat_l)?;
        let r0 = self.merge.forward(&cat_r)?;
        let seg = Some(ww);
        let (l1, c0) = self.layers[0].forward(&l0, &l0, None, seg)?;
        let (r1, c1) = self.layers[0].forward(&r0, &r0, None, seg)?;
        let (l2, c2) = self.layers[1].forward(&l1, &r1, None, seg)?;
        let (r2, c3) = self.layers[1].forward(&r1, &l2, None, seg)?;
        let scale = 1.0 / (d_f as f64).sqrt();
        let mut probs = Vec::with_capacity(kept.len());
        let mut matches = Vec::with_capacity(kept.len());
        for (m, &n) in kept.iter().enumerate() {
            let q = l2.row(m * ww + ww / 2);
            let win = r2.slice(s![m * ww..(m + 1) * ww, ..]);
            let p = softmax(&(win.dot(&q) * scale));
            let (right, sigma2) = expectation(p.as_slice().expect("contiguous"), &coords[m]);
            let (i, j, confidence) = seeds[n];
            matches.push(FineMatch { coarse_i: i, coarse_j: j, left: Self::left_center(cfg, i), right, confidence, sigma2 });
            probs.push(p);
        }
        let cache = FineCache {
            kept,
            ww,
            rows_l,
            rows_r,
            seeds_l,
            seeds_r,
            cat_l,
            cat_r,
            layer_caches: vec![c0, c1, c2, c3],
            l_out: l2,
            r_out: r2,
            probs,
            coords,
            bounds,
        };
        Ok((FineMatchSet { matches, dropped }, cache))
    }

    /// Backward from `d right` of each kept match. `σ²` is not differentiated.
    /// Returns gradients of `(fine_l, fine_r, coarse_l, coarse_r)`.
    #[allow(clippy::type_complexity)]
    pub fn backward(
        &self,
        c: &FineCache,
        d_right: &[[f64; 2]],
        shapes: ((usize, usize), (usize, usize)),
        grad: &mut FineModule,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let ((nf, d_f), (nc, d_c)) = shapes;
        let mut dfl = Array2::zeros((nf, d_f));
        let mut dfr = Array2::zeros((nf, d_f));
        let mut dcl = Array2::zeros((nc, d_c));
        let mut dcr = Array2::zeros((nc, d_c));
        if c.kept.is_empty() {
            return (dfl, dfr, dcl, dcr);
        }
        let ww = c.ww;
        let scale = 1.0 / (d_f as f64).sqrt();
        let mut dl2 = Array2::zeros(c.l_out.dim());
        let mut dr2 = Array2::zeros(c.r_out.dim());
        for (m, p) in c.probs.iter().enumerate() {
            let [gr, gc] = d_right[m];
            let dp: Array1<f64> = c.coords[m].iter().map(|x| gr * x.row + gc * x.col).collect();
            let dot = (&dp * p).sum();
            let ds = (p * &(dp - dot)) * scale;
            let qi = m * ww + ww / 2;
            let win = c.r_out.slice(s![m * ww..(m + 1) * ww, ..]);
            let dq = win.t().dot(&ds);
            let mut drow = dl2.row_mut(qi);
            drow += &dq;
            let q = c.l_out.row(qi);
            for (k, &g) in ds.iter().enumerate() {
                dr2.row_mut(m * ww + k).scaled_add(g, &q);
            }
        }
        let lc = &c.layer_caches;
        let (dr1, dl2_b) = self.layers[1].backward(&lc[3], &dr2, &mut grad.layers[1]);
        dl2 += &dl2_b;
        let (dl1, dr1_b) = self.layers[1].backward(&lc[2], &dl2, &mut grad.layers[1]);
        let dr1 = dr1 + dr1_b;
        let (x, s_) = self.layers[0].backward(&lc[1], &dr1, &mut grad.layers[0]);
        let dr0 = x + s_;
        let (x, s_) = self.layers[0].backward(&lc[0], &dl1, &mut grad.layers[0]);
        let dl0 = x + s_;
        let dcat_l = self.merge.backward(&c.cat_l, &dl0, &mut grad.merge);
        let dcat_r = self.merge.backward(&c.cat_r, &dr0, &mut grad.merge);
        let scatter = |dcat: &Array2<f64>, rows: &[usize], seeds: &[usize], df: &mut Array2<f64>, dc: &mut Array2<f64>| {
            for (t, &r) in rows.iter().enumerate() {
                let mut fr = df.row_mut(r);
                fr += &dcat.slice(s![t, ..d_f]);
                let mut cr = dc.row_mut(seeds[t / ww]);
                cr += &dcat.slice(s![t, d_f..]);
            }
        };
        scatter(&dcat_l, &c.rows_l, &c.seeds_l, &mut dfl, &mut dcl);
        scatter(&dcat_r, &c.rows_r, &c.seeds_r, &mut dfr, &mut dcr);
        (dfl, dfr, dcl, dcr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{assign, flatten, gradcheck, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, step: f64) -> Vec<Pixel> {
        (0..w * w).map(|k| Pixel::new((k / w) as f64 * step, (k % w) as f64 * step)).collect()
    }

    #[test]
    fn one_hot_and_uniform_expectation() {
        let coords = grid(5, 2.0);
        let mut p = vec![0.0; 25];
        p[12] = 1.0;
        let (m, v) = expectation(&p, &coords);
        assert_eq!(m, coords[12]);
        assert_eq!(v, 0.0);
        let u = vec![1.0 / 25.0; 25];
        let (m, v) = expectation(&u, &coords);
        assert!((m.row - 4.0).abs() < 1e-12 && (m.col - 4.0).abs() < 1e-12);
        // Per axis: step² (w² - 1) / 12.
        assert!((v - 2.0 * 4.0 * 24.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn expectation_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<Pixel> = (0..9).map(|_| Pixel::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0))).collect();
        let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let (m, v) = expectation(&p, &coords);
        let mut er = 0.0;
        let mut ec = 0.0;
        let mut e2 = 0.0;
        for k in 0..9 {
            er += p[k] * coords[k].row;
            ec += p[k] * coords[k].col;
            e2 += p[k] * (coords[k].row.powi(2) + coords[k].col.powi(2));
        }
        assert!((m.row - er).abs() < 1e-12 && (m.col - ec).abs() < 1e-12);
        assert!((v - (e2 - er * er - ec * ec)).abs() < 1e-10);
    }

    fn small_cfg() -> MatcherConfig {
        MatcherConfig { p: 32, d_c: 8, d_f: 8, n_h: 2, w: 3, ..Default::default() }
    }

    fn features(cfg: &MatcherConfig, rng: &mut impl Rng) -> (FeatureSeq, FeatureSeq, Array2<f64>, Array2<f64>) {
        let nf = cfg.fine_side();
        let nc = cfg.coarse_side() * cfg.coarse_side();
        let f = |n: usize, d: usize, rng: &mut dyn rand::RngCore| Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        (
            FeatureSeq::new(f(nf * nf, cfg.d_f, rng), nf, nf).unwrap(),
            FeatureSeq::new(f(nf * nf, cfg.d_f, rng), nf, nf).unwrap(),
            f(nc, cfg.d_c, rng),
            f(nc, cfg.d_c, rng),
        )
    }

    #[test]
    fn windows_stay_in_bounds_and_borders_drop() {
        let cfg = MatcherConfig { w: 5, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let module = FineModule::init(&cfg, &mut rng);
        let (fl, fr, cl, cr) = features(&cfg, &mut rng);
        // Coarse side 8, fine side 16. Cell 0 centers at fine (1, 1): dropped for w = 5.
        let seeds = vec![(0, 9, 0.5), (9, 18, 0.6), (27, 36, 0.7)];
        let (set, cache) = module.forward(&cfg, &fl, &fr, &cl, &cr, &seeds).unwrap();
        assert_eq!(set.dropped, 1);
        assert_eq!(cache.kept, vec![1, 2]);
        for (m, b) in set.matches.iter().zip(&cache.bounds) {
            assert!(m.right.row >= b[0] && m.right.row <= b[1] && m.right.col >= b[2] && m.right.col <= b[3]);
            assert!(m.sigma2 > 0.0);
        }
        assert_eq!(set.matches[0].left, Pixel::new(7.0, 7.0));
    }

    #[test]
    fn fine_gradcheck() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut module = FineModule::init(&cfg, &mut rng);
        for l in &mut module.layers {
            l.ln1.gain.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            l.ln2.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let (fl, fr, cl, cr) = features(&cfg, &mut rng);
        let seeds = vec![(9, 10, 0.5), (20, 19, 0.6)];
        let weights = [[0.7, -0.4], [-0.2, 0.9]];
        let objective = |m: &FineModule, fl: &FeatureSeq, fr: &FeatureSeq, cl: &Array2<f64>, cr: &Array2<f64>| {
            let (set, _) = m.forward(&cfg, fl, fr, cl, cr, &seeds).unwrap();
            set.matches.iter().zip(&weights).map(|(x, w)| w[0] * x.right.row + w[1] * x.right.col).sum::<f64>()
        };
        let (_, cache) = module.forward(&cfg, &fl, &fr, &cl, &cr, &seeds).unwrap();
        let mut g = zeros_like(&module);
        let shapes = ((fl.len(), cfg.d_f), (cl.nrows(), cfg.d_c));
        let (dfl, _dfr, dcl, dcr) = module.backward(&cache, &weights, shapes, &mut g);
        let rep = gradcheck(
            |t| {
                let mut m = module.clone();
                assign(&mut m, t);
                objective(&m, &fl, &fr, &cl, &cr)
            },
            &flatten(&module),
            &flatten(&g),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "params {rep:?}");
        let rep = gradcheck(
            |t| {
                let a = FeatureSeq::new(Array2::from_shape_vec(fl.data.dim(), t.to_vec()).unwrap(), fl.h, fl.w).unwrap();
                objective(&module, &a, &fr, &cl, &cr)
            },
            &fl.data.iter().copied().collect::<Vec<_>>(),
            &dfl.iter().copied().collect::<Vec<_>>(),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "fine_l {rep:?}");
        for (coarse, dc, left) in [(&cl, &dcl, true), (&cr, &dcr, false)] {
            let rep = gradcheck(
                |t| {
                    let a = Array2::from_shape_vec(coarse.dim(), t.to_vec()).unwrap();
                    if left {
                        objective(&module, &fl, &fr, &a, &cr)
                    } else {
                        objective(&module, &fl, &fr, &cl, &a)
                    }
                },
                &coarse.iter().copied().collect::<Vec<_>>(),
                &dc.iter().copied().collect::<Vec<_>>(),
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed, "coarse {left} {rep:?}");
        }
    }
}

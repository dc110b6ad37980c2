use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::NnError;

/// Additive score for inadmissible entries.
pub const MASK_NEG: f64 = -1e9;

/// Row-wise softmax with inadmissible entries forced to exactly zero.
///
/// A row without any admissible entry is a caller error.
pub fn masked_softmax(scores: &Array2<f64>, mask: Option<&Array2<bool>>) -> Result<Array2<f64>, NnError> {
    if let Some(m) = mask {
        if m.dim() != scores.dim() {
            return Err(NnError::Shape(format!("mask {:?} for scores {:?}", m.dim(), scores.dim())));
        }
    }
    let mut out = scores.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mrow = mask.map(|m| m.row(i));
        if let Some(mr) = &mrow {
            if !mr.iter().any(|&v| v) {
                return Err(NnError::EmptyMaskRow(i));
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
    Ok(out)
}

/// `dS = P ⊙ (dP - rowsum(dP ⊙ P))`.
pub fn masked_softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let dot = (dp * p).sum_axis(Axis(1));
    let mut ds = dp - &dot.insert_axis(Axis(1));
    ds *= p;
    ds
}

#[derive(Debug, Clone)]
pub struct SdpCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    heads: usize,
    /// Per-head attention probabilities.
    pub probs: Vec<Array2<f64>>,
}

fn head_cols(x: &Array2<f64>, h: usize, heads: usize) -> ArrayView2<'_, f64> {
    let d = x.ncols() / heads;
    x.slice(s![.., h * d..(h + 1) * d])
}

fn check_heads(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Result<(), NnError> {
    if heads == 0 || q.ncols() % heads != 0 || v.ncols() % heads != 0 {
        return Err(NnError::Shape(format!("{heads} heads for widths {} and {}", q.ncols(), v.ncols())));
    }
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(NnError::Shape(format!(
            "q {:?}, k {:?}, v {:?} are incompatible",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// Multi-head `softmax(Q Kᵀ / sqrt(d_head)) V` with an optional admissibility mask
/// shared by all heads.
pub fn sdp_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: Option<&Array2<bool>>,
    heads: usize,
) -> Result<(Array2<f64>, SdpCache), NnError> {
    check_heads(q, k, v, heads)?;
    let dh = q.ncols() / heads;
    let dv = v.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let scores = head_cols(q, h, heads).dot(&head_cols(k, h, heads).t()) * scale;
        let p = masked_softmax(&scores, mask)?;
        out.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&p.dot(&head_cols(v, h, heads)));
        probs.push(p);
    }
    Ok((out, SdpCache { q: q.clone(), k: k.clone(), v: v.clone(), heads, probs }))
}

/// Returns `(dQ, dK, dV)`.
pub fn sdp_attention_backward(cache: &SdpCache, dout: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = cache.heads;
    let dh = cache.q.ncols() / heads;
    let dvh = cache.v.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..heads {
        let p = &cache.probs[h];
        let doh = dout.slice(s![.., h * dvh..(h + 1) * dvh]);
        dv.slice_mut(s![.., h * dvh..(h + 1) * dvh]).assign(&p.t().dot(&doh));
        let dp = doh.dot(&head_cols(&cache.v, h, heads).t());
        let ds = masked_softmax_backward(p, &dp) * scale;
        dq.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&head_cols(&cache.k, h, heads)));
        dk.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.t().dot(&head_cols(&cache.q, h, heads)));
    }
    (dq, dk, dv)
}

fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn elu1_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone)]
pub struct LinearAttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    heads: usize,
    qf: Array2<f64>,
    kf: Array2<f64>,
    kv: Vec<Array2<f64>>,
    ksum: Vec<Array1<f64>>,
    num: Vec<Array2<f64>>,
    den: Vec<Array1<f64>>,
}

/// Multi-head linear attention with feature map `elu(x) + 1`:
/// `out_i = φ(q_i)ᵀ (Σ_j φ(k_j) v_jᵀ) / φ(q_i)ᵀ Σ_j φ(k_j)`, evaluated in `O(n d²)`.
pub fn linear_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> Result<(Array2<f64>, LinearAttentionCache), NnError> {
    check_heads(q, k, v, heads)?;
    let dv = v.ncols() / heads;
    let qf = q.mapv(elu1);
    let kf = k.mapv(elu1);
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let (mut kvs, mut ksums, mut nums, mut dens) = (vec![], vec![], vec![], vec![]);
    for h in 0..heads {
        let qh = head_cols(&qf, h, heads);
        let kh = head_cols(&kf, h, heads);
        let kv = kh.t().dot(&head_cols(v, h, heads));
        let ksum = kh.sum_axis(Axis(0));
        let num = qh.dot(&kv);
        let den = qh.dot(&ksum);
        let o = &num / &den.view().insert_axis(Axis(1));
        out.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&o);
        kvs.push(kv);
        ksums.push(ksum);
        nums.push(num);
        dens.push(den);
    }
    let cache = LinearAttentionCache {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        heads,
        qf,
        kf,
        kv: kvs,
        ksum: ksums,
        num: nums,
        den: dens,
    };
    Ok((out, cache))
}

/// Returns `(dQ, dK, dV)`.
pub fn linear_attention_backward(
    c: &LinearAttentionCache,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = c.heads;
    let dh = c.q.ncols() / heads;
    let dvh = c.v.ncols() / heads;
    let mut dqf = Array2::zeros(c.q.dim());
    let mut dkf = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for h in 0..heads {
        let doh = dout.slice(s![.., h * dvh..(h + 1) * dvh]);
        let den = &c.den[h];
        let dnum = &doh / &den.view().insert_axis(Axis(1));
        // d den_i = -Σ_c dout_ic num_ic / den_i²
        let dden = -((&doh * &c.num[h]).sum_axis(Axis(1))) / den.mapv(|d| d * d);
        let qh = head_cols(&c.qf, h, heads);
        let kh = head_cols(&c.kf, h, heads);
        let mut dq_h = dnum.dot(&c.kv[h].t());
        for (mut row, &g) in dq_h.rows_mut().into_iter().zip(dden.iter()) {
            row.scaled_add(g, &c.ksum[h]);
        }
        let dkv = qh.t().dot(&dnum);
        let dksum = qh.t().dot(&dden);
        let mut dk_h = head_cols(&c.v, h, heads).dot(&dkv.t());
        dk_h += &dksum.view().insert_axis(Axis(0));
        dv.slice_mut(s![.., h * dvh..(h + 1) * dvh]).assign(&kh.dot(&dkv));
        dqf.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq_h);
        dkf.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dk_h);
    }
    let dq = dqf * &c.q.mapv(elu1_grad);
    let dk = dkf * &c.k.mapv(elu1_grad);
    (dq, dk, dv)
}

/// Cache of [`linear_attention_segmented`].
#[derive(Debug, Clone)]
pub struct SegmentedLinearCache {
    heads: usize,
    sq: usize,
    sk: usize,
    qf: Array2<f64>,
    kf: Array2<f64>,
    v: Array2<f64>,
    out: Array2<f64>,
    /// `(block, head, dh, dv)` row-major.
    kv: Vec<f64>,
    /// `(block, head, dh)`.
    ksum: Vec<f64>,
    /// `(query, head)`.
    den: Vec<f64>,
}

/// Linear attention over consecutive blocks: block `b` of `q` (rows of `sq`)
/// attends to block `b` of `k, v` (rows of `sk`). Same result as calling
/// [`linear_attention`] per block, without per-block allocations.
pub fn linear_attention_segmented(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    sq: usize,
    sk: usize,
) -> Result<(Array2<f64>, SegmentedLinearCache), NnError> {
    check_heads(q, k, v, heads)?;
    let (nq, nk) = (q.nrows(), k.nrows());
    if sq == 0 || sk == 0 || nq % sq != 0 || nk % sk != 0 || nq / sq != nk / sk {
        return Err(NnError::Shape(format!("cannot split {nq} x {nk} tokens into blocks of {sq} x {sk}")));
    }
    let nb = nq / sq;
    let (d, dvt) = (q.ncols(), v.ncols());
    let (dh, dv) = (d / heads, dvt / heads);
    let qf = q.as_standard_layout().mapv(elu1);
    let kf = k.as_standard_layout().mapv(elu1);
    let v = v.as_standard_layout().into_owned();
    let (qs, ks, vs) = (qf.as_slice().expect("standard"), kf.as_slice().expect("standard"), v.as_slice().expect("standard"));
    let mut kv = vec![0.0; nb * heads * dh * dv];
    let mut ksum = vec![0.0; nb * heads * dh];
    let mut den = vec![0.0; nq * heads];
    let mut out = vec![0.0; nq * dvt];
    for b in 0..nb {
        for h in 0..heads {
            let bh = b * heads + h;
            let kvb = &mut kv[bh * dh * dv..(bh + 1) * dh * dv];
            let ksb = &mut ksum[bh * dh..(bh + 1) * dh];
            for t in b * sk..(b + 1) * sk {
                let kr = &ks[t * d + h * dh..t * d + (h + 1) * dh];
                let vr = &vs[t * dvt + h * dv..t * dvt + (h + 1) * dv];
                for (a, &ka) in kr.iter().enumerate() {
                    ksb[a] += ka;
                    for (o, &vc) in kvb[a * dv..(a + 1) * dv].iter_mut().zip(vr) {
                        *o += ka * vc;
                    }
                }
            }
            for t in b * sq..(b + 1) * sq {
                let qr = &qs[t * d + h * dh..t * d + (h + 1) * dh];
                let z: f64 = qr.iter().zip(ksb.iter()).map(|(a, b)| a * b).sum();
                den[t * heads + h] = z;
                let orow = &mut out[t * dvt + h * dv..t * dvt + (h + 1) * dv];
                for (a, &qa) in qr.iter().enumerate() {
                    for (o, &kvc) in orow.iter_mut().zip(&kvb[a * dv..(a + 1) * dv]) {
                        *o += qa * kvc;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
        }
    }
    let out = Array2::from_shape_vec((nq, dvt), out).expect("shape");
    let cache = SegmentedLinearCache { heads, sq, sk, qf, kf, v, out: out.clone(), kv, ksum, den };
    Ok((out, cache))
}

/// Returns `(dQ, dK, dV)`.
pub fn linear_attention_segmented_backward(
    c: &SegmentedLinearCache,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = c.heads;
    let (nq, d) = c.qf.dim();
    let (nk, dvt) = c.v.dim();
    let (dh, dv) = (d / heads, dvt / heads);
    let nb = nq / c.sq;
    let dout = dout.as_standard_layout();
    let ds = dout.as_slice().expect("standard");
    let (qs, ks, vs) = (c.qf.as_slice().expect("standard"), c.kf.as_slice().expect("standard"), c.v.as_slice().expect("standard"));
    let os = c.out.as_slice().expect("standard");
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dvv = vec![0.0; nk * dvt];
    let mut dkv = vec![0.0; dh * dv];
    let mut dksum = vec![0.0; dh];
    let mut dn = vec![0.0; dv];
    for b in 0..nb {
        for h in 0..heads {
            let bh = b * heads + h;
            let kvb = &c.kv[bh * dh * dv..(bh + 1) * dh * dv];
            let ksb = &c.ksum[bh * dh..(bh + 1) * dh];
            dkv.fill(0.0);
            dksum.fill(0.0);
            for t in b * c.sq..(b + 1) * c.sq {
                let z = c.den[t * heads + h];
                let dor = &ds[t * dvt + h * dv..t * dvt + (h + 1) * dv];
                let orow = &os[t * dvt + h * dv..t * dvt + (h + 1) * dv];
                // d den = -Σ_c dout_c out_c / den
                let dden = -dor.iter().zip(orow).map(|(a, b)| a * b).sum::<f64>() / z;
                for (n, &g) in dn.iter_mut().zip(dor) {
                    *n = g / z;
                }
                let qr = &qs[t * d + h * dh..t * d + (h + 1) * dh];
                let dqr = &mut dq[t * d + h * dh..t * d + (h + 1) * dh];
                for a in 0..dh {
                    let kva = &kvb[a * dv..(a + 1) * dv];
                    dqr[a] = dn.iter().zip(kva).map(|(x, y)| x * y).sum::<f64>() + dden * ksb[a];
                    let qa = qr[a];
                    for (o, &n) in dkv[a * dv..(a + 1) * dv].iter_mut().zip(&dn) {
                        *o += qa * n;
                    }
                    dksum[a] += qa * dden;
                }
            }
            for t in b * c.sk..(b + 1) * c.sk {
                let kr = &ks[t * d + h * dh..t * d + (h + 1) * dh];
                let vr = &vs[t * dvt + h * dv..t * dvt + (h + 1) * dv];
                let dkr = &mut dk[t * d + h * dh..t * d + (h + 1) * dh];
                for a in 0..dh {
                    dkr[a] = vr.iter().zip(&dkv[a * dv..(a + 1) * dv]).map(|(x, y)| x * y).sum::<f64>() + dksum[a];
                }
                let dvr = &mut dvv[t * dvt + h * dv..t * dvt + (h + 1) * dv];
                for (a, &ka) in kr.iter().enumerate() {
                    for (o, &g) in dvr.iter_mut().zip(&dkv[a * dv..(a + 1) * dv]) {
                        *o += ka * g;
                    }
                }
            }
        }
    }
    // φ'(x) is φ(x) for x ≤ 0 and 1 otherwise; φ(x) > 1 exactly when x > 0.
    let phi_grad = |f: f64| if f > 1.0 { 1.0 } else { f };
    for (g, &f) in dq.iter_mut().zip(qs) {
        *g *= phi_grad(f);
    }
    for (g, &f) in dk.iter_mut().zip(ks) {
        *g *= phi_grad(f);
    }
    (
        Array2::from_shape_vec((nq, d), dq).expect("shape"),
        Array2::from_shape_vec((nk, d), dk).expect("shape"),
        Array2::from_shape_vec((nk, dvt), dvv).expect("shape"),
    )
}

/// Explicit per-head weights `φ(q_i)·φ(k_j) / Σ_j φ(q_i)·φ(k_j)` of linear attention.
/// Quadratic in the token count; meant for inspection, not for the forward pass.
pub fn linear_attention_weights(q: &Array2<f64>, k: &Array2<f64>, heads: usize) -> Vec<Array2<f64>> {
    let qf = q.mapv(elu1);
    let kf = k.mapv(elu1);
    (0..heads)
        .map(|h| {
            let mut w = head_cols(&qf, h, heads).dot(&head_cols(&kf, h, heads).t());
            for mut row in w.rows_mut() {
                let z = row.sum();
                row /= z;
            }
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn flat(a: &Array2<f64>) -> Vec<f64> {
        a.iter().copied().collect()
    }

    fn unflat(v: &[f64], like: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_vec(like.dim(), v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_scores_give_uniform_probabilities() {
        let p = masked_softmax(&Array2::from_elem((2, 4), 3.0), None).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let all = Array2::from_elem((2, 4), true);
        assert_eq!(masked_softmax(&Array2::from_elem((2, 4), 3.0), Some(&all)).unwrap(), p);
    }

    #[test]
    fn single_admissible_entry_takes_all_mass() {
        let mut mask = Array2::from_elem((3, 3), false);
        for i in 0..3 {
            mask[(i, (i + 1) % 3)] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = masked_softmax(&rand_mat(3, 3, &mut rng), Some(&mask)).unwrap();
        for ((i, j), &v) in p.indexed_iter() {
            assert_eq!(v, if mask[(i, j)] { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut mask = Array2::from_elem((2, 3), true);
        mask.row_mut(1).fill(false);
        assert_eq!(masked_softmax(&Array2::zeros((2, 3)), Some(&mask)), Err(NnError::EmptyMaskRow(1)));
    }

    #[test]
    fn softmax_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = rand_mat(5, 7, &mut rng) * 4.0;
        let mask = Array2::from_shape_fn((5, 7), |_| rng.gen_bool(0.6));
        let mut mask = mask;
        for i in 0..5 {
            mask[(i, i)] = true;
        }
        let p = masked_softmax(&s, Some(&mask)).unwrap();
        for i in 0..5 {
            let z: f64 = (0..7).filter(|&j| mask[(i, j)]).map(|j| s[(i, j)].exp()).sum();
            for j in 0..7 {
                let want = if mask[(i, j)] { s[(i, j)].exp() / z } else { 0.0 };
                assert!((p[(i, j)] - want).abs() < 1e-12);
            }
            assert!((p.row(i).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(1, 8, &mut rng);
        let k = rand_mat(1, 8, &mut rng);
        let v = rand_mat(1, 8, &mut rng);
        let (o, _) = sdp_attention(&q, &k, &v, None, 2).unwrap();
        assert!(max_abs(&(&o - &v)) < 1e-15);
        let (o, _) = linear_attention(&q, &k, &v, 2).unwrap();
        assert!(max_abs(&(&o - &v)) < 1e-15);
    }

    #[test]
    fn saturated_one_hot_attention_permutes_v() {
        let n = 4;
        let perm = [2, 0, 3, 1];
        let scale = 200.0;
        let q = Array2::from_shape_fn((n, n), |(i, j)| if j == perm[i] { scale } else { 0.0 });
        let k = Array2::from_shape_fn((n, n), |(i, j)| if i == j { scale } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_mat(n, 3, &mut rng);
        let (o, _) = sdp_attention(&q, &k, &v, None, 1).unwrap();
        // Off-target weights are exp(-scale² / 2) ~ 0.
        for i in 0..n {
            for c in 0..3 {
                assert!((o[(i, c)] - v[(perm[i], c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sdp_gradcheck_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (rand_mat(5, 8, &mut rng), rand_mat(6, 8, &mut rng), rand_mat(6, 4, &mut rng));
        let mut mask = Array2::from_shape_fn((5, 6), |_| rng.gen_bool(0.5));
        for i in 0..5 {
            mask[(i, i)] = true;
        }
        let r = rand_mat(5, 4, &mut rng);
        let (_, cache) = sdp_attention(&q, &k, &v, Some(&mask), 2).unwrap();
        let (dq, dk, dv) = sdp_attention_backward(&cache, &r);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (sdp_attention(q, k, v, Some(&mask), 2).unwrap().0 * &r).sum()
        };
        let rq = gradcheck(|t| loss(&unflat(t, &q), &k, &v), &flat(&q), &flat(&dq), 1e-6, 1e-5).unwrap();
        let rk = gradcheck(|t| loss(&q, &unflat(t, &k), &v), &flat(&k), &flat(&dk), 1e-6, 1e-5).unwrap();
        let rv = gradcheck(|t| loss(&q, &k, &unflat(t, &v)), &flat(&v), &flat(&dv), 1e-6, 1e-5).unwrap();
        assert!(rq.passed && rk.passed && rv.passed, "{rq:?} {rk:?} {rv:?}");
    }

    /// Explicit n x n normalized kernel.
    fn linear_attention_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Array2<f64> {
        let dh = q.ncols() / heads;
        let dv = v.ncols() / heads;
        let mut out = Array2::zeros((q.nrows(), v.ncols()));
        for h in 0..heads {
            for i in 0..q.nrows() {
                let mut w = vec![0.0; k.nrows()];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = (0..dh).map(|c| elu1(q[(i, h * dh + c)]) * elu1(k[(j, h * dh + c)])).sum();
                }
                let z: f64 = w.iter().sum();
                for c in 0..dv {
                    out[(i, h * dv + c)] = (0..k.nrows()).map(|j| w[j] * v[(j, h * dv + c)]).sum::<f64>() / z;
                }
            }
        }
        out
    }

    #[test]
    fn linear_attention_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (rand_mat(8, 16, &mut rng), rand_mat(8, 16, &mut rng), rand_mat(8, 16, &mut rng));
        for heads in [1, 4] {
            let (o, _) = linear_attention(&q, &k, &v, heads).unwrap();
            assert!(max_abs(&(&o - &linear_attention_oracle(&q, &k, &v, heads))) < 1e-10);
        }
    }

    #[test]
    fn linear_attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (rand_mat(5, 8, &mut rng), rand_mat(7, 8, &mut rng), rand_mat(7, 4, &mut rng));
        let r = rand_mat(5, 4, &mut rng);
        let (_, cache) = linear_attention(&q, &k, &v, 2).unwrap();
        let (dq, dk, dv) = linear_attention_backward(&cache, &r);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| (linear_attention(q, k, v, 2).unwrap().0 * &r).sum();
        let rq = gradcheck(|t| loss(&unflat(t, &q), &k, &v), &flat(&q), &flat(&dq), 1e-6, 1e-5).unwrap();
        let rk = gradcheck(|t| loss(&q, &unflat(t, &k), &v), &flat(&k), &flat(&dk), 1e-6, 1e-5).unwrap();
        let rv = gradcheck(|t| loss(&q, &k, &unflat(t, &v)), &flat(&v), &flat(&dv), 1e-6, 1e-5).unwrap();
        assert!(rq.passed && rk.passed && rv.passed, "{rq:?} {rk:?} {rv:?}");
    }

    #[test]
    fn segmented_kernel_matches_per_block_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (sq, sk, nb) = (3, 4, 5);
        let (q, k, v) = (rand_mat(sq * nb, 8, &mut rng), rand_mat(sk * nb, 8, &mut rng), rand_mat(sk * nb, 6, &mut rng));
        let r = rand_mat(sq * nb, 6, &mut rng);
        let (o, c) = linear_attention_segmented(&q, &k, &v, 2, sq, sk).unwrap();
        let (dq, dk, dv) = linear_attention_segmented_backward(&c, &r);
        for b in 0..nb {
            let (rq, rk) = (b * sq..(b + 1) * sq, b * sk..(b + 1) * sk);
            let blk = |a: &Array2<f64>, r: std::ops::Range<usize>| a.slice(s![r, ..]).to_owned();
            let (ob, cb) = linear_attention(&blk(&q, rq.clone()), &blk(&k, rk.clone()), &blk(&v, rk.clone()), 2).unwrap();
            let (gq, gk, gv) = linear_attention_backward(&cb, &blk(&r, rq.clone()));
            assert!(max_abs(&(&ob - &blk(&o, rq.clone()))) < 1e-12);
            assert!(max_abs(&(&gq - &blk(&dq, rq))) < 1e-12);
            assert!(max_abs(&(&gk - &blk(&dk, rk.clone()))) < 1e-12);
            assert!(max_abs(&(&gv - &blk(&dv, rk))) < 1e-12);
        }
        assert!(linear_attention_segmented(&q, &k, &v, 2, 4, 4).is_err());
    }

    #[test]
    fn softmax_backward_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = rand_mat(4, 5, &mut rng);
        let mut mask = Array2::from_shape_fn((4, 5), |_| rng.gen_bool(0.7));
        mask.column_mut(0).fill(true);
        let r = rand_mat(4, 5, &mut rng);
        let p = masked_softmax(&s0, Some(&mask)).unwrap();
        let ds = masked_softmax_backward(&p, &r);
        let rep = gradcheck(
            |t| (masked_softmax(&unflat(t, &s0), Some(&mask)).unwrap() * &r).sum(),
            &flat(&s0),
            &flat(&ds),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    proptest! {
        #[test]
        fn linear_attention_oracle_on_random_sizes(n in 1usize..64, m in 1usize..64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (rand_mat(n, 8, &mut rng) * 2.0, rand_mat(m, 8, &mut rng) * 2.0, rand_mat(m, 4, &mut rng));
            let (o, _) = linear_attention(&q, &k, &v, 2).unwrap();
            prop_assert!(max_abs(&(&o - &linear_attention_oracle(&q, &k, &v, 2))) < 1e-10);
        }

        #[test]
        fn linear_attention_is_permutation_invariant_over_keys(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (rand_mat(6, 8, &mut rng), rand_mat(9, 8, &mut rng), rand_mat(9, 8, &mut rng));
            let mut order: Vec<usize> = (0..9).collect();
            order.rotate_left(seed as usize % 9);
            order.swap(0, 8);
            let kp = k.select(Axis(0), &order);
            let vp = v.select(Axis(0), &order);
            let (a, _) = linear_attention(&q, &k, &v, 2).unwrap();
            let (b, _) = linear_attention(&q, &kp, &vp, 2).unwrap();
            prop_assert!(max_abs(&(&a - &b)) < 1e-12);
        }

        #[test]
        fn masked_rows_sum_to_one(seed in 0u64..1000, n in 1usize..12, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rand_mat(n, m, &mut rng) * 10.0;
            let mut mask = Array2::from_shape_fn((n, m), |_| rng.gen_bool(0.5));
            for i in 0..n {
                mask[(i, i % m)] = true;
            }
            let p = masked_softmax(&s, Some(&mask)).unwrap();
            for ((i, j), &v) in p.indexed_iter() {
                if !mask[(i, j)] {
                    prop_assert_eq!(v, 0.0);
                }
            }
            for row in p.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}

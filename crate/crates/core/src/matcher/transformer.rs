use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    impl_params_for_fields, linear_attention_segmented, linear_attention_segmented_backward, linear_attention_weights, relu, relu_backward,
    sdp_attention, sdp_attention_backward, LayerNorm, LayerNormCache, Linear, NnError, SdpCache, SegmentedLinearCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `elu + 1` kernelized attention, used for self-attention.
    Linear,
    /// Softmax attention, optionally masked, used for cross-attention.
    Full,
}

/// One post-norm attention block:
///
/// ```text
/// msg = LN1(merge(attn(q(x), k(src), v(src))))
/// out = x + LN2(ffn([x, msg]))
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub merge: Linear,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
    pub kind: AttentionKind,
    pub heads: usize,
}

impl_params_for_fields!(AttnLayer { q, k, v, merge, ln1, ffn1, ffn2, ln2 });

#[derive(Debug, Clone)]
enum AttnCache {
    Linear(SegmentedLinearCache),
    Full(Vec<SdpCache>),
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Array2<f64>,
    src: Array2<f64>,
    segment: Option<usize>,
    attn: Array2<f64>,
    attn_cache: AttnCache,
    ln1: LayerNormCache,
    cat: Array2<f64>,
    hidden: Array2<f64>,
    hidden_act: Array2<f64>,
    ln2: LayerNormCache,
}

impl AttnLayer {
    pub fn init(d: usize, heads: usize, kind: AttentionKind, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::init(d, d, false, rng),
            k: Linear::init(d, d, false, rng),
            v: Linear::init(d, d, false, rng),
            merge: Linear::init(d, d, false, rng),
            ln1: LayerNorm::new(d),
            ffn1: Linear::init(2 * d, 2 * d, false, rng),
            ffn2: Linear::init(d, 2 * d, false, rng),
            ln2: LayerNorm::new(d),
            kind,
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.d_in()
    }

    /// Attend from `x` to `src`. With `segment = Some(s)` the token lists are
    /// split into consecutive blocks of `s` rows and block `b` of `x` only
    /// attends to block `b` of `src`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        src: &Array2<f64>,
        mask: Option<&Array2<bool>>,
        segment: Option<usize>,
    ) -> Result<(Array2<f64>, LayerCache), NnError> {
        let d = self.dim();
        if x.ncols() != d || src.ncols() != d {
            return Err(NnError::Shape(format!("layer of width {d} got inputs {:?} and {:?}", x.dim(), src.dim())));
        }
        if self.kind == AttentionKind::Linear && mask.is_some() {
            return Err(NnError::Shape("linear attention does not take a mask".into()));
        }
        let q = self.q.apply(x);
        let k = self.k.apply(src);
        let v = self.v.apply(src);
        let blocks: Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> = match segment {
            None => vec![(0..x.nrows(), 0..src.nrows())],
            Some(sz) => {
                if sz == 0 || x.nrows() % sz != 0 || x.nrows() != src.nrows() || mask.is_some() {
                    return Err(NnError::Shape(format!("cannot split {} x {} tokens into blocks of {sz}", x.nrows(), src.nrows())));
                }
                (0..x.nrows() / sz).map(|b| (b * sz..(b + 1) * sz, b * sz..(b + 1) * sz)).collect()
            }
        };
        let mut attn = Array2::zeros((x.nrows(), d));
        let attn_cache = match self.kind {
            AttentionKind::Linear => {
                let (sq, sk) = segment.map_or((x.nrows(), src.nrows()), |sz| (sz, sz));
                let (o, c) = linear_attention_segmented(&q, &k, &v, self.heads, sq, sk)?;
                attn = o;
                AttnCache::Linear(c)
            }
            AttentionKind::Full => {
                let mut caches = Vec::with_capacity(blocks.len());
                for (rq, rk) in &blocks {
                    let (o, c) = sdp_attention(
                        &q.slice(s![rq.clone(), ..]).to_owned(),
                        &k.slice(s![rk.clone(), ..]).to_owned(),
                        &v.slice(s![rk.clone(), ..]).to_owned(),
                        mask,
                        self.heads,
                    )?;
                    attn.slice_mut(s![rq.clone(), ..]).assign(&o);
                    caches.push(c);
                }
                AttnCache::Full(caches)
            }
        };
        let merged = self.merge.apply(&attn);
        let (msg, ln1) = self.ln1.forward(&merged);
        let cat = concatenate![Axis(1), *x, msg];
        let hidden = self.ffn1.apply(&cat);
        let hidden_act = relu(&hidden);
        let (m2, ln2) = self.ln2.forward(&self.ffn2.apply(&hidden_act));
        let out = x + &m2;
        let cache = LayerCache { x: x.clone(), src: src.clone(), segment, attn, attn_cache, ln1, cat, hidden, hidden_act, ln2 };
        Ok((out, cache))
    }

    /// Returns `(dx, dsrc)`. For self-attention the caller adds both.
    pub fn backward(&self, c: &LayerCache, dout: &Array2<f64>, grad: &mut AttnLayer) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let mut dx = dout.clone();
        let dm2 = self.ln2.backward(&c.ln2, dout, &mut grad.ln2);
        let dh_act = self.ffn2.backward(&c.hidden_act, &dm2, &mut grad.ffn2);
        let dh = relu_backward(&c.hidden, &dh_act);
        let dcat = self.ffn1.backward(&c.cat, &dh, &mut grad.ffn1);
        dx += &dcat.slice(s![.., ..d]);
        let dmsg = dcat.slice(s![.., d..]).to_owned();
        let dmerged = self.ln1.backward(&c.ln1, &dmsg, &mut grad.ln1);
        let dattn = self.merge.backward(&c.attn, &dmerged, &mut grad.merge);
        let mut dq = Array2::zeros(c.x.dim());
        let mut dk = Array2::zeros(c.src.dim());
        let mut dv = Array2::zeros(c.src.dim());
        match &c.attn_cache {
            AttnCache::Linear(lc) => (dq, dk, dv) = linear_attention_segmented_backward(lc, &dattn),
            AttnCache::Full(caches) => {
                let sz_q = c.segment.unwrap_or(c.x.nrows());
                let sz_k = c.segment.unwrap_or(c.src.nrows());
                for (b, bc) in caches.iter().enumerate() {
                    let rq = b * sz_q..(b + 1) * sz_q;
                    let rk = b * sz_k..(b + 1) * sz_k;
                    let (gq, gk, gv) = sdp_attention_backward(bc, &dattn.slice(s![rq.clone(), ..]).to_owned());
                    dq.slice_mut(s![rq, ..]).assign(&gq);
                    dk.slice_mut(s![rk.clone(), ..]).assign(&gk);
                    dv.slice_mut(s![rk, ..]).assign(&gv);
                }
            }
        }
        dx += &self.q.backward(&c.x, &dq, &mut grad.q);
        let mut dsrc = self.k.backward(&c.src, &dk, &mut grad.k);
        dsrc += &self.v.backward(&c.src, &dv, &mut grad.v);
        (dx, dsrc)
    }

    /// Per-head attention weights of an unsegmented forward pass.
    pub fn attention_maps(&self, c: &LayerCache) -> Vec<Array2<f64>> {
        match &c.attn_cache {
            AttnCache::Full(v) => v[0].probs.clone(),
            AttnCache::Linear(_) => linear_attention_weights(&self.q.apply(&c.x), &self.k.apply(&c.src), self.heads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{assign, flatten, gradcheck, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn perturb_norms(layer: &mut AttnLayer, rng: &mut impl Rng) {
        for ln in [&mut layer.ln1, &mut layer.ln2] {
            ln.gain.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            ln.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
    }

    #[test]
    fn layer_gradcheck_both_kinds() {
        for kind in [AttentionKind::Linear, AttentionKind::Full] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut layer = AttnLayer::init(8, 2, kind, &mut rng);
            perturb_norms(&mut layer, &mut rng);
            let x = rand_mat(6, 8, &mut rng);
            let src = rand_mat(5, 8, &mut rng);
            let mask = (kind == AttentionKind::Full).then(|| {
                let mut m = Array2::from_shape_fn((6, 5), |_| rng.gen_bool(0.5));
                m.column_mut(0).fill(true);
                m
            });
            let r = rand_mat(6, 8, &mut rng);
            let (_, cache) = layer.forward(&x, &src, mask.as_ref(), None).unwrap();
            let mut g = zeros_like(&layer);
            let (dx, dsrc) = layer.backward(&cache, &r, &mut g);
            let rep = gradcheck(
                |t| {
                    let mut l = layer.clone();
                    assign(&mut l, t);
                    (l.forward(&x, &src, mask.as_ref(), None).unwrap().0 * &r).sum()
                },
                &flatten(&layer),
                &flatten(&g),
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed, "{kind:?} params {rep:?}");
            let rep = gradcheck(
                |t| {
                    let xi = Array2::from_shape_vec((6, 8), t.to_vec()).unwrap();
                    (layer.forward(&xi, &src, mask.as_ref(), None).unwrap().0 * &r).sum()
                },
                &x.iter().copied().collect::<Vec<_>>(),
                &dx.iter().copied().collect::<Vec<_>>(),
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed, "{kind:?} x {rep:?}");
            let rep = gradcheck(
                |t| {
                    let si = Array2::from_shape_vec((5, 8), t.to_vec()).unwrap();
                    (layer.forward(&x, &si, mask.as_ref(), None).unwrap().0 * &r).sum()
                },
                &src.iter().copied().collect::<Vec<_>>(),
                &dsrc.iter().copied().collect::<Vec<_>>(),
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed, "{kind:?} src {rep:?}");
        }
    }

    #[test]
    fn segments_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = AttnLayer::init(8, 2, AttentionKind::Linear, &mut rng);
        let x = rand_mat(6, 8, &mut rng);
        let src = rand_mat(6, 8, &mut rng);
        let (joint, _) = layer.forward(&x, &src, None, Some(3)).unwrap();
        for b in 0..2 {
            let xs = x.slice(s![b * 3..(b + 1) * 3, ..]).to_owned();
            let ss = src.slice(s![b * 3..(b + 1) * 3, ..]).to_owned();
            let (alone, _) = layer.forward(&xs, &ss, None, None).unwrap();
            assert_eq!(joint.slice(s![b * 3..(b + 1) * 3, ..]), alone);
        }
    }

    #[test]
    fn segmented_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = AttnLayer::init(4, 2, AttentionKind::Linear, &mut rng);
        let x = rand_mat(6, 4, &mut rng);
        let src = rand_mat(6, 4, &mut rng);
        let r = rand_mat(6, 4, &mut rng);
        let (_, cache) = layer.forward(&x, &src, None, Some(2)).unwrap();
        let mut g = zeros_like(&layer);
        let (_, dsrc) = layer.backward(&cache, &r, &mut g);
        let rep = gradcheck(
            |t| {
                let si = Array2::from_shape_vec((6, 4), t.to_vec()).unwrap();
                (layer.forward(&x, &si, None, Some(2)).unwrap().0 * &r).sum()
            },
            &src.iter().copied().collect::<Vec<_>>(),
            &dsrc.iter().copied().collect::<Vec<_>>(),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

//! Finite-difference checks of every backward pass, run as one suite.

use nalgebra::Matrix3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::AffineFundamental;
use crate::matcher::{
    coarse_transform, coarse_transform_backward, dual_softmax_backward, masked_dual_softmax, AttentionKind, AttnLayer,
    FineModule, GtPair, LossOptions, Matcher, MatcherConfig, MatcherError, Supervision, ToyEncoder,
};
use crate::nn::{
    assign, flatten, gradcheck_at, linear_attention, linear_attention_backward, map_params, masked_softmax,
    masked_softmax_backward, sdp_attention, sdp_attention_backward, Conv, FeatureSeq, GradReport, LayerNorm, Linear,
    NnError, Params, zeros_like,
};
use crate::Pixel;

pub const CHECK_EPS: f64 = 1e-6;
pub const CHECK_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub report: GradReport,
}

fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn vec_of(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn mat(shape: (usize, usize), t: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, t.to_vec()).expect("shape matches slice")
}

fn random_mask(r: usize, c: usize, rng: &mut impl Rng) -> Array2<bool> {
    let mut m = Array2::from_shape_fn((r, c), |_| rng.gen_bool(0.6));
    m.column_mut(0).fill(true);
    m
}

/// Check a module's parameters and its inputs together. `f` receives the
/// module with its parameters replaced and the flat input vector.
fn module_check<P: Params + Clone>(
    name: &str,
    module: &P,
    grad: &P,
    x: &[f64],
    dx: &[f64],
    f: impl Fn(&P, &[f64]) -> f64,
) -> Result<CheckResult, NnError> {
    let mut theta = flatten(module);
    let np = theta.len();
    theta.extend_from_slice(x);
    let mut g = flatten(grad);
    g.extend_from_slice(dx);
    let all: Vec<usize> = (0..theta.len()).collect();
    let report = gradcheck_at(
        |t| {
            let mut m = module.clone();
            assign(&mut m, &t[..np]);
            f(&m, &t[np..])
        },
        &theta,
        &g,
        &all,
        CHECK_EPS,
        CHECK_TOL,
    )?;
    Ok(CheckResult { name: name.into(), report })
}

fn input_check(name: &str, x: &[f64], dx: &[f64], f: impl Fn(&[f64]) -> f64) -> Result<CheckResult, NnError> {
    let all: Vec<usize> = (0..x.len()).collect();
    let report = gradcheck_at(f, x, dx, &all, CHECK_EPS, CHECK_TOL)?;
    Ok(CheckResult { name: name.into(), report })
}

fn check_linear(rng: &mut ChaCha8Rng, lora: bool) -> Result<CheckResult, NnError> {
    let mut lin = Linear::init(4, 5, true, rng);
    if lora {
        lin.attach_lora(2, 4.0, rng);
        if let Some(l) = lin.lora.as_mut() {
            l.b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
    }
    let x = rand_mat(3, 5, rng);
    let r = rand_mat(3, 4, rng);
    let mut g = zeros_like(&lin);
    let dx = lin.backward(&x, &r, &mut g);
    let name = if lora { "linear_lora" } else { "linear" };
    module_check(name, &lin, &g, &vec_of(&x), &vec_of(&dx), |m, t| (m.apply(&mat((3, 5), t)) * &r).sum())
}

fn check_layernorm(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let mut ln = LayerNorm::new(6);
    ln.gain.mapv_inplace(|_| rng.gen_range(0.5..1.5));
    ln.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    let x = rand_mat(4, 6, rng);
    let r = rand_mat(4, 6, rng);
    let (_, cache) = ln.forward(&x);
    let mut g = zeros_like(&ln);
    let dx = ln.backward(&cache, &r, &mut g);
    module_check("layernorm", &ln, &g, &vec_of(&x), &vec_of(&dx), |m, t| (m.forward(&mat((4, 6), t)).0 * &r).sum())
}

fn check_conv(rng: &mut ChaCha8Rng, stride: usize) -> Result<CheckResult, NnError> {
    let (h, w, c) = (5, 4, 3);
    let conv = Conv::init(c, 2, 3, stride, rng);
    let x = FeatureSeq::new(rand_mat(h * w, c, rng), h, w)?;
    let (y, cols) = conv.forward(&x)?;
    let r = rand_mat(y.data.nrows(), y.data.ncols(), rng);
    let mut g = zeros_like(&conv);
    let dx = conv.backward(&cols, h, w, &r, &mut g);
    module_check(&format!("conv_stride{stride}"), &conv, &g, &vec_of(&x.data), &vec_of(&dx), |m, t| {
        let xi = FeatureSeq { data: mat((h * w, c), t), h, w };
        (m.forward(&xi).expect("conv shape").0.data * &r).sum()
    })
}

fn check_masked_softmax(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let s = rand_mat(4, 5, rng) * 3.0;
    let mask = random_mask(4, 5, rng);
    let r = rand_mat(4, 5, rng);
    let p = masked_softmax(&s, Some(&mask))?;
    let ds = masked_softmax_backward(&p, &r);
    input_check("masked_softmax", &vec_of(&s), &vec_of(&ds), |t| {
        (masked_softmax(&mat((4, 5), t), Some(&mask)).expect("admissible rows") * &r).sum()
    })
}

fn qkv_check(
    name: &str,
    rng: &mut ChaCha8Rng,
    run: impl Fn(&Array2<f64>, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
    back: impl Fn(&Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>),
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<CheckResult, NnError> {
    let r = rand_mat(q.nrows(), v.ncols(), rng);
    let (dq, dk, dv) = back(&r);
    let mut x = vec_of(q);
    x.extend(vec_of(k));
    x.extend(vec_of(v));
    let mut dx = vec_of(&dq);
    dx.extend(vec_of(&dk));
    dx.extend(vec_of(&dv));
    let (nq, nk) = (q.len(), k.len());
    input_check(name, &x, &dx, |t| {
        let qi = mat(q.dim(), &t[..nq]);
        let ki = mat(k.dim(), &t[nq..nq + nk]);
        let vi = mat(v.dim(), &t[nq + nk..]);
        (run(&qi, &ki, &vi) * &r).sum()
    })
}

fn check_sdp(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let (q, k, v) = (rand_mat(4, 6, rng), rand_mat(5, 6, rng), rand_mat(5, 4, rng));
    let mask = random_mask(4, 5, rng);
    let (_, cache) = sdp_attention(&q, &k, &v, Some(&mask), 2)?;
    qkv_check(
        "sdp_attention_masked",
        rng,
        |q, k, v| sdp_attention(q, k, v, Some(&mask), 2).expect("attention shapes").0,
        |r| sdp_attention_backward(&cache, r),
        &q,
        &k,
        &v,
    )
}

fn check_linear_attention(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let (q, k, v) = (rand_mat(4, 6, rng), rand_mat(5, 6, rng), rand_mat(5, 4, rng));
    let (_, cache) = linear_attention(&q, &k, &v, 2)?;
    qkv_check(
        "linear_attention",
        rng,
        |q, k, v| linear_attention(q, k, v, 2).expect("attention shapes").0,
        |r| linear_attention_backward(&cache, r),
        &q,
        &k,
        &v,
    )
}

fn perturb_norms(layer: &mut AttnLayer, rng: &mut impl Rng) {
    for ln in [&mut layer.ln1, &mut layer.ln2] {
        ln.gain.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        ln.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
}

fn check_attn_layer(rng: &mut ChaCha8Rng, kind: AttentionKind) -> Result<CheckResult, NnError> {
    let mut layer = AttnLayer::init(8, 2, kind, rng);
    perturb_norms(&mut layer, rng);
    let x = rand_mat(6, 8, rng);
    let src = rand_mat(5, 8, rng);
    let mask = (kind == AttentionKind::Full).then(|| random_mask(6, 5, rng));
    let r = rand_mat(6, 8, rng);
    let (_, cache) = layer.forward(&x, &src, mask.as_ref(), None)?;
    let mut g = zeros_like(&layer);
    let (dx, dsrc) = layer.backward(&cache, &r, &mut g);
    let mut inputs = vec_of(&x);
    inputs.extend(vec_of(&src));
    let mut d = vec_of(&dx);
    d.extend(vec_of(&dsrc));
    let name = match kind {
        AttentionKind::Linear => "attn_layer_linear",
        AttentionKind::Full => "attn_layer_full",
    };
    module_check(name, &layer, &g, &inputs, &d, |m, t| {
        let xi = mat((6, 8), &t[..48]);
        let si = mat((5, 8), &t[48..]);
        (m.forward(&xi, &si, mask.as_ref(), None).expect("layer shapes").0 * &r).sum()
    })
}

#[derive(Clone)]
struct CoarseStack {
    self_layers: Vec<AttnLayer>,
    cross_layers: Vec<AttnLayer>,
}

crate::nn::impl_params_for_fields!(CoarseStack { self_layers, cross_layers });

fn check_coarse_transform(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let mut stack = CoarseStack {
        self_layers: vec![AttnLayer::init(8, 2, AttentionKind::Linear, rng)],
        cross_layers: vec![AttnLayer::init(8, 2, AttentionKind::Full, rng)],
    };
    perturb_norms(&mut stack.self_layers[0], rng);
    perturb_norms(&mut stack.cross_layers[0], rng);
    let fl = rand_mat(6, 8, rng);
    let fr = rand_mat(7, 8, rng);
    let mut mask = random_mask(6, 7, rng);
    mask.row_mut(0).fill(true);
    let masks = vec![Some(mask)];
    let rl = rand_mat(6, 8, rng);
    let rr = rand_mat(7, 8, rng);
    let (_, _, cache) = coarse_transform(&stack.self_layers, &stack.cross_layers, &fl, &fr, &masks)?;
    let mut g = zeros_like(&stack);
    let (dfl, dfr) = coarse_transform_backward(
        &stack.self_layers,
        &stack.cross_layers,
        &cache,
        &rl,
        &rr,
        &mut g.self_layers,
        &mut g.cross_layers,
    );
    let mut inputs = vec_of(&fl);
    inputs.extend(vec_of(&fr));
    let mut d = vec_of(&dfl);
    d.extend(vec_of(&dfr));
    module_check("coarse_transform", &stack, &g, &inputs, &d, |m, t| {
        let a = mat((6, 8), &t[..48]);
        let b = mat((7, 8), &t[48..]);
        let (l, r, _) = coarse_transform(&m.self_layers, &m.cross_layers, &a, &b, &masks).expect("coarse shapes");
        (l * &rl).sum() + (r * &rr).sum()
    })
}

fn check_dual_softmax(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let fl = rand_mat(5, 4, rng);
    let fr = rand_mat(6, 4, rng);
    let mut mask = Array2::from_shape_fn((5, 6), |_| rng.gen_bool(0.6));
    mask.row_mut(1).fill(false);
    let r = rand_mat(5, 6, rng);
    let (_, cache) = masked_dual_softmax(&fl, &fr, Some(&mask), 0.5)?;
    let (dfl, dfr) = dual_softmax_backward(&cache, &r);
    let mut x = vec_of(&fl);
    x.extend(vec_of(&fr));
    let mut dx = vec_of(&dfl);
    dx.extend(vec_of(&dfr));
    input_check("dual_softmax_masked", &x, &dx, |t| {
        let a = mat((5, 4), &t[..20]);
        let b = mat((6, 4), &t[20..]);
        (masked_dual_softmax(&a, &b, Some(&mask), 0.5).expect("dual softmax shapes").0 * &r).sum()
    })
}

fn small_cfg() -> MatcherConfig {
    MatcherConfig { p: 32, d_c: 8, d_f: 8, n_c: 2, n_h: 2, w: 3, enc_channels: [4, 6, 8], fpn_dim: 6, ..Default::default() }
}

fn check_fine(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let cfg = small_cfg();
    let mut module = FineModule::init(&cfg, rng);
    for l in &mut module.layers {
        perturb_norms(l, rng);
    }
    let (nf, nc) = (cfg.fine_side(), cfg.coarse_side() * cfg.coarse_side());
    let fl = FeatureSeq::new(rand_mat(nf * nf, cfg.d_f, rng), nf, nf)?;
    let fr = FeatureSeq::new(rand_mat(nf * nf, cfg.d_f, rng), nf, nf)?;
    let cl = rand_mat(nc, cfg.d_c, rng);
    let cr = rand_mat(nc, cfg.d_c, rng);
    let seeds = vec![(9, 10, 0.5), (20, 19, 0.6)];
    let weights = [[0.7, -0.4], [-0.2, 0.9]];
    let (_, cache) = module.forward(&cfg, &fl, &fr, &cl, &cr, &seeds)?;
    let mut g = zeros_like(&module);
    let (dfl, dfr, dcl, dcr) = module.backward(&cache, &weights, ((fl.len(), cfg.d_f), (nc, cfg.d_c)), &mut g);
    let parts = [&fl.data, &fr.data, &cl, &cr];
    let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    let inputs: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    let d: Vec<f64> = [&dfl, &dfr, &dcl, &dcr].iter().flat_map(|p| p.iter().copied()).collect();
    module_check("fine", &module, &g, &inputs, &d, |m, t| {
        let mut at = 0;
        let mut take = |k: usize, shape: (usize, usize)| {
            let a = mat(shape, &t[at..at + sizes[k]]);
            at += sizes[k];
            a
        };
        let a = FeatureSeq { data: take(0, fl.data.dim()), h: nf, w: nf };
        let b = FeatureSeq { data: take(1, fr.data.dim()), h: nf, w: nf };
        let c = take(2, cl.dim());
        let e = take(3, cr.dim());
        let (set, _) = m.forward(&cfg, &a, &b, &c, &e, &seeds).expect("fine shapes");
        set.matches.iter().zip(&weights).map(|(x, w)| w[0] * x.right.row + w[1] * x.right.col).sum::<f64>()
    })
}

fn check_encoder(rng: &mut ChaCha8Rng) -> Result<CheckResult, NnError> {
    let cfg = MatcherConfig { p: 16, enc_channels: [3, 4, 5], fpn_dim: 4, d_c: 4, d_f: 4, ..Default::default() };
    let mut enc = ToyEncoder::init(&cfg, rng);
    enc.attach_lora(2, 2.0, rng);
    for c in &mut enc.enc {
        if let Some(l) = c.lin.lora.as_mut() {
            l.b.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }
    }
    let img = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0));
    let out = enc.forward(&img)?;
    let rc = rand_mat(out.coarse.data.nrows(), out.coarse.data.ncols(), rng);
    let rf = rand_mat(out.fine.data.nrows(), out.fine.data.ncols(), rng);
    let mut g = zeros_like(&enc);
    enc.backward(&out.cache, &rc, &rf, &mut g);
    module_check("encoder", &enc, &g, &[], &[], |m, _| {
        let o = m.forward(&img).expect("encoder shapes");
        (&o.coarse.data * &rc).sum() + (&o.fine.data * &rf).sum()
    })
}

fn check_end_to_end(rng: &mut ChaCha8Rng) -> Result<CheckResult, MatcherError> {
    let mut m = Matcher::new(small_cfg())?;
    m.attach_lora();
    m.visit_mut("", &mut |name, d| {
        if name.contains(".lora.b") || name.contains("ln") {
            d.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
    });
    let p = m.cfg.p;
    let a = Array2::from_shape_fn((p, p), |_| rng.gen_range(0.0..1.0));
    let b = Array2::from_shape_fn((p, p), |(r, c)| a[(r, (c + 1) % p)]);
    // Rows correspond: lines `row_R = row_L`.
    let f = AffineFundamental::from_matrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0))?;
    let side = m.cfg.coarse_side();
    let pairs = (0..side * side)
        .filter(|k| k % side + 1 < side)
        .map(|i| {
            let c = FineModule::left_center(&m.cfg, i);
            GtPair { i, j: i, target: Some(Pixel::new(c.row + 0.3, c.col - 0.6)) }
        })
        .collect();
    let sup = Supervision { pairs };
    let (rep, grad) = m.loss_and_grad(&a, &b, Some(&f), 3, &sup, &LossOptions::default())?;
    // σ² is held constant by the loss, so freeze it for the numeric side.
    let opts = LossOptions { sigma_override: Some(rep.sigma2.clone()), ..Default::default() };
    let theta = flatten(&m);
    let g = flatten(&grad);
    let mut idx = Vec::new();
    let mut at = 0;
    for info in map_params(&m) {
        for k in 0..info.len.min(2) {
            idx.push(at + k * (info.len / 2).max(1));
        }
        at += info.len;
    }
    let report = gradcheck_at(
        |t| {
            let mut mm = m.clone();
            assign(&mut mm, t);
            mm.loss(&a, &b, Some(&f), 3, &sup, &opts).map(|l| l.total).unwrap_or(f64::NAN)
        },
        &theta,
        &g,
        &idx,
        CHECK_EPS,
        END_TO_END_TOL,
    )?;
    Ok(CheckResult { name: "end_to_end_sampled".into(), report })
}

/// Every component check, each on its own fixed-seed fixture.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>, MatcherError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_4144);
    let r = &mut rng;
    let mut out = vec![
        check_linear(r, false)?,
        check_linear(r, true)?,
        check_layernorm(r)?,
        check_conv(r, 1)?,
        check_conv(r, 2)?,
        check_masked_softmax(r)?,
        check_sdp(r)?,
        check_linear_attention(r)?,
        check_attn_layer(r, AttentionKind::Linear)?,
        check_attn_layer(r, AttentionKind::Full)?,
        check_coarse_transform(r)?,
        check_dual_softmax(r)?,
        check_fine(r)?,
        check_encoder(r)?,
    ];
    out.push(check_end_to_end(r)?);
    Ok(out)
}

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coarse::{
    coarse_transform, coarse_transform_backward, dual_softmax_backward, masked_dual_softmax, select_coarse_matches,
    CoarseMatchSet,
};
use super::encoder::ToyEncoder;
use super::fine::{FineMatchSet, FineModule};
use super::loss::{coarse_loss, fine_loss};
use super::transformer::{AttentionKind, AttnLayer};
use super::{MatcherConfig, MatcherError};
use crate::epipolar::{band_width_at, build_epipolar_mask, CoarseGrid};
use crate::geometry::AffineFundamental;
use crate::nn::{impl_params_for_fields, sinusoidal_pe_2d, Params};
use crate::Pixel;

/// The full network. Parameter names start with `encoder`, `coarse_self`,
/// `coarse_cross` or `fine`; adapter tensors contain `.lora.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matcher {
    pub cfg: MatcherConfig,
    pub encoder: ToyEncoder,
    pub coarse_self: Vec<AttnLayer>,
    pub coarse_cross: Vec<AttnLayer>,
    pub fine: FineModule,
}

impl_params_for_fields!(Matcher { encoder, coarse_self, coarse_cross, fine });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    /// Every weight is trained.
    Base,
    /// Base encoder convolutions are frozen; adapters and the rest train.
    Lora,
}

impl TrainStage {
    pub fn trainable(self, name: &str) -> bool {
        match self {
            TrainStage::Base => !name.contains(".lora."),
            TrainStage::Lora => name.contains(".lora.") || !name.starts_with("encoder.enc."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPair {
    pub i: usize,
    pub j: usize,
    /// Sub-pixel right position of the left fine-window center of `i`.
    pub target: Option<Pixel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Supervision {
    pub pairs: Vec<GtPair>,
}

#[derive(Debug, Clone, Default)]
pub struct LossOptions {
    /// Fixed `σ²` per kept fine window, in place of the values computed in the
    /// forward pass. Used to make the loss a smooth function for gradient checks.
    pub sigma_override: Option<Vec<f64>>,
    /// Indices into `Supervision::pairs` that seed the fine module. All pairs when `None`.
    pub fine_subset: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub coarse_used: usize,
    pub coarse_excluded: usize,
    pub fine_used: usize,
    pub fine_excluded: usize,
    /// `σ²` of every kept fine window, in seed order.
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput {
    pub coarse: CoarseMatchSet,
    pub fine: FineMatchSet,
    pub confidence: Array2<f64>,
    /// Band width of the matching mask, `None` when unmasked.
    pub band_width: Option<f64>,
}

/// Strongest keys of one query in one attention map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub layer: usize,
    /// `self_l`, `self_r`, `cross_lr` or `cross_rl`.
    pub kind: String,
    pub head: usize,
    pub query: usize,
    pub keys: Vec<usize>,
    pub weights: Vec<f64>,
}

struct CoarseState {
    enc_l: super::encoder::EncoderOutput,
    enc_r: super::encoder::EncoderOutput,
    masks: Vec<Option<Array2<bool>>>,
    tl: Array2<f64>,
    tr: Array2<f64>,
    tcache: super::coarse::CoarseTransformCache,
}

impl Matcher {
    pub fn new(cfg: MatcherConfig) -> Result<Self, MatcherError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let encoder = ToyEncoder::init(&cfg, &mut rng);
        let coarse_self = (0..cfg.n_c).map(|_| AttnLayer::init(cfg.d_c, cfg.n_h, AttentionKind::Linear, &mut rng)).collect();
        let coarse_cross = (0..cfg.n_c).map(|_| AttnLayer::init(cfg.d_c, cfg.n_h, AttentionKind::Full, &mut rng)).collect();
        let fine = FineModule::init(&cfg, &mut rng);
        Ok(Self { cfg, encoder, coarse_self, coarse_cross, fine })
    }

    /// Adapters on the encoder convolutions with `B = 0`, so outputs are unchanged.
    pub fn attach_lora(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.init_seed.wrapping_add(1));
        self.encoder.attach_lora(self.cfg.lora.rank, self.cfg.lora.alpha, &mut rng);
    }

    pub fn has_lora(&self) -> bool {
        self.encoder.enc.iter().any(|c| c.lin.lora.is_some())
    }

    pub fn grid(&self) -> CoarseGrid {
        CoarseGrid::square(self.cfg.p, self.cfg.r_c)
    }

    /// Cross-attention masks per coarse layer.
    pub fn layer_masks(
        &self,
        f0: Option<&AffineFundamental>,
        epoch: usize,
    ) -> Result<Vec<Option<Array2<bool>>>, MatcherError> {
        let sched = self.cfg.schedule();
        let grid = self.grid();
        let mut out: Vec<Option<Array2<bool>>> = Vec::with_capacity(self.cfg.n_c);
        let mut last: Option<(f64, Array2<bool>)> = None;
        for l in 0..self.cfg.n_c {
            let (Some(f), Some(b)) = (f0, band_width_at(&sched, l, epoch)) else {
                out.push(None);
                continue;
            };
            if let Some((pb, m)) = &last {
                if *pb == b {
                    out.push(Some(m.clone()));
                    continue;
                }
            }
            let m = build_epipolar_mask(f, &grid, &grid, b)?.admissible;
            last = Some((b, m.clone()));
            out.push(Some(m));
        }
        Ok(out)
    }

    fn coarse_state(
        &self,
        il: &Array2<f64>,
        ir: &Array2<f64>,
        f0: Option<&AffineFundamental>,
        epoch: usize,
    ) -> Result<CoarseState, MatcherError> {
        let p = self.cfg.p;
        if il.dim() != (p, p) || ir.dim() != (p, p) {
            return Err(MatcherError::Nn(crate::nn::NnError::Shape(format!(
                "images {:?} and {:?}, expected {p}x{p}",
                il.dim(),
                ir.dim()
            ))));
        }
        let enc_l = self.encoder.forward(il)?;
        let enc_r = self.encoder.forward(ir)?;
        let side = self.cfg.coarse_side();
        let pe = sinusoidal_pe_2d(side, side, self.cfg.d_c)?.data;
        let masks = self.layer_masks(f0, epoch)?;
        let (tl, tr, tcache) = coarse_transform(
            &self.coarse_self,
            &self.coarse_cross,
            &(&enc_l.coarse.data + &pe),
            &(&enc_r.coarse.data + &pe),
            &masks,
        )?;
        Ok(CoarseState { enc_l, enc_r, masks, tl, tr, tcache })
    }

    /// Inference on one patch pair. `f0 = None` runs every layer unmasked.
    pub fn forward(
        &self,
        il: &Array2<f64>,
        ir: &Array2<f64>,
        f0: Option<&AffineFundamental>,
        epoch: usize,
    ) -> Result<MatchOutput, MatcherError> {
        Ok(self.forward_inner(il, ir, f0, epoch, None)?.0)
    }

    /// As [`Self::forward`], also returning the `top_k` keys of every query in
    /// every coarse attention map.
    pub fn forward_with_attention(
        &self,
        il: &Array2<f64>,
        ir: &Array2<f64>,
        f0: Option<&AffineFundamental>,
        epoch: usize,
        top_k: usize,
    ) -> Result<(MatchOutput, Vec<AttentionDump>), MatcherError> {
        self.forward_inner(il, ir, f0, epoch, Some(top_k))
    }

    fn forward_inner(
        &self,
        il: &Array2<f64>,
        ir: &Array2<f64>,
        f0: Option<&AffineFundamental>,
        epoch: usize,
        dump: Option<usize>,
    ) -> Result<(MatchOutput, Vec<AttentionDump>), MatcherError> {
        let st = self.coarse_state(il, ir, f0, epoch)?;
        let mask = st.masks.last().cloned().flatten();
        let (conf, _) = masked_dual_softmax(&st.tl, &st.tr, mask.as_ref(), self.cfg.tau)?;
        let coarse = select_coarse_matches(&conf, self.cfg.delta_c);
        if let Some(m) = &mask {
            if let Some(bad) = coarse.matches.iter().find(|c| !m[(c.i, c.j)]) {
                return Err(MatcherError::MaskViolation(bad.i, bad.j));
            }
        }
        let seeds: Vec<(usize, usize, f64)> = coarse.matches.iter().map(|m| (m.i, m.j, m.confidence)).collect();
        let (fine, _) =
            self.fine.forward(&self.cfg, &st.enc_l.fine, &st.enc_r.fine, &st.tl, &st.tr, &seeds)?;
        let band_width = band_width_at(&self.cfg.schedule(), self.cfg.n_c - 1, epoch).filter(|_| f0.is_some());
        let mut dumps = Vec::new();
        if let Some(k) = dump {
            const KINDS: [&str; 4] = ["self_l", "self_r", "cross_lr", "cross_rl"];
            for (l, caches) in st.tcache.layers.iter().enumerate() {
                for (kind, cache) in KINDS.iter().zip(caches) {
                    let layer = if kind.starts_with("self") { &self.coarse_self[l] } else { &self.coarse_cross[l] };
                    for (head, w) in layer.attention_maps(cache).into_iter().enumerate() {
                        for (query, row) in w.rows().into_iter().enumerate() {
                            let mut idx: Vec<usize> = (0..row.len()).collect();
                            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                            idx.truncate(k);
                            let weights = idx.iter().map(|&j| row[j]).collect();
                            dumps.push(AttentionDump { layer: l, kind: kind.to_string(), head, query, keys: idx, weights });
                        }
                    }
                }
            }
        }
        Ok((MatchOutput { coarse, fine, confidence: conf, band_width }, dumps))
    }

    /// `L_c + L_f` and its gradient for one supervised pair. The fine module is
    /// seeded with the ground-truth coarse pairs.
    pub fn loss_and_grad(
        &self,
        il: &Array2<f64>,
        ir: &Array2<f64>,
        f0: Option<&AffineFundamental>,
        epoch: usize,
        sup: &Supervision,
        opts: &LossOptions,
    ) -> Result<(LossReport, Matcher), MatcherError> {
        let st = self.coarse_state(il, ir, f0, epoch)?;
        let mask = st.masks.last().cloned().flatten();
        let (conf, dcache) = masked_dual_softmax(&st.tl, &st.tr, mask.as_ref(), self.cfg.tau)?;
        let gt: Vec<(usize, usize)> = sup.pairs.iter().map(|g| (g.i, g.j)).collect();
        let lc = coarse_loss(&conf, &gt, mask.as_ref())?;
        let mut dp = Array2::zeros(conf.dim());
        for &(i, j, g) in &lc.grad {
            dp[(i, j)] += g;
        }
        let (mut dtl, mut dtr) = dual_softmax_backward(&dcache, &dp);

        let fine_idx: Vec<usize> = match &opts.fine_subset {
            Some(idx) => {
                if let Some(&bad) = idx.iter().find(|&&n| n >= sup.pairs.len()) {
                    return Err(MatcherError::EmptyLoss(format!("fine subset index {bad} for {} pairs", sup.pairs.len())));
                }
                idx.clone()
            }
            None => (0..sup.pairs.len()).collect(),
        };
        let seeds: Vec<(usize, usize, f64)> = fine_idx.iter().map(|&n| &sup.pairs[n]).map(|g| (g.i, g.j, conf[(g.i, g.j)])).collect();
        let (fset, fcache) = self.fine.forward(&self.cfg, &st.enc_l.fine, &st.enc_r.fine, &st.tl, &st.tr, &seeds)?;
        let sigma2: Vec<f64> = match &opts.sigma_override {
            Some(s) if s.len() == fset.matches.len() => s.clone(),
            Some(s) => {
                return Err(MatcherError::EmptyLoss(format!(
                    "sigma override has {} entries for {} fine windows",
                    s.len(),
                    fset.matches.len()
                )))
            }
            None => fset.matches.iter().map(|m| m.sigma2).collect(),
        };
        let mut used = Vec::new();
        for (m, &n) in fcache.kept.iter().enumerate() {
            let b = fcache.bounds[m];
            if let Some(t) = sup.pairs[fine_idx[n]].target {
                if t.row >= b[0] && t.row <= b[1] && t.col >= b[2] && t.col <= b[3] {
                    used.push((m, t));
                }
            }
        }
        let mut d_right = vec![[0.0; 2]; fset.matches.len()];
        let mut l_f = 0.0;
        if !used.is_empty() {
            let pred: Vec<Pixel> = used.iter().map(|&(m, _)| fset.matches[m].right).collect();
            let tgt: Vec<Pixel> = used.iter().map(|&(_, t)| t).collect();
            let s2: Vec<f64> = used.iter().map(|&(m, _)| sigma2[m]).collect();
            let lf = fine_loss(&pred, &tgt, &s2)?;
            l_f = lf.value;
            for (&(m, _), g) in used.iter().zip(&lf.grad) {
                d_right[m] = *g;
            }
        }

        let mut grad = crate::nn::zeros_like(self);
        let nf = st.enc_l.fine.len();
        let nc = st.tl.nrows();
        let (dfl, dfr, dcl, dcr) =
            self.fine.backward(&fcache, &d_right, ((nf, self.cfg.d_f), (nc, self.cfg.d_c)), &mut grad.fine);
        dtl += &dcl;
        dtr += &dcr;
        let (dl0, dr0) = coarse_transform_backward(
            &self.coarse_self,
            &self.coarse_cross,
            &st.tcache,
            &dtl,
            &dtr,
            &mut grad.coarse_self,
            &mut grad.coarse_cross,
        );
        self.encoder.backward(&st.enc_l.cache, &dl0, &dfl, &mut grad.encoder);
        self.encoder.backward(&st.enc_r.cache, &dr0, &dfr, &mut grad.encoder);

        let report = LossReport {
            total: lc.value + l_f,
            l_c: lc.value,
            l_f,
            coarse_used: lc.used,
            coarse_excluded: lc.excluded,
            fine_used: used.len(),
            fine_excluded: seeds.len() - used.len(),
            sigma2,
        };
        Ok((report, grad))
    }

    /// Loss only, for finite differences and evaluation.
    pub fn loss(
        &self,
        il: &Array2<f64>,
        ir: &Array2<f64>,
        f0: Option<&AffineFundamental>,
        epoch: usize,
        sup: &Supervision,
        opts: &LossOptions,
    ) -> Result<LossReport, MatcherError> {
        Ok(self.loss_and_grad(il, ir, f0, epoch, sup, opts)?.0)
    }

    /// Zero the gradient entries that `stage` does not train.
    pub fn mask_gradient(grad: &mut Matcher, stage: TrainStage) {
        grad.visit_mut("", &mut |name, d| {
            if !stage.trainable(name) {
                d.fill(0.0);
            }
        });
    }
}

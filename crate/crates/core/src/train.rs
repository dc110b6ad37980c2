//! Toy-scale supervised training: learning-rate law, AdamW, gradient
//! accumulation with global-norm clipping, and the two-stage loop.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{affine_fundamental_from_cameras, AffineFundamental, GeometryError};
use crate::groundtruth::{gt_matches, supervision, SceneData};
use crate::matcher::{Checkpoint, LossOptions, Matcher, MatcherConfig, MatcherError, Supervision, TrainStage, TrainState};
use crate::nn::{assign, flatten, map_params, Params};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("non-finite gradient in `{name}` at step {step}")]
    NonFinite { name: String, step: u64 },
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn config_err(field: &str, msg: impl Into<String>) -> TrainError {
    TrainError::Config { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Canonical learning rate at `b_ref`.
    pub lr: f64,
    pub b_ref: usize,
    /// True batch size the canonical rate is scaled to.
    pub batch: usize,
    /// Warm-up length in optimizer steps.
    pub warmup_steps: u64,
    pub warmup_start: f64,
    pub milestones: Vec<usize>,
    pub gamma_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub grad_accum: usize,
    pub clip: f64,
    /// Training stops after this many optimizer steps or `epochs`, whichever is first.
    pub max_steps: Option<u64>,
    pub epochs: usize,
    /// Optimizer steps per epoch. Without it an epoch is one pass over the pairs.
    pub steps_per_epoch: Option<u64>,
    pub stage: TrainStage,
    /// Seeds the per-pass shuffle of the training pairs.
    pub seed: u64,
    /// Refine at most this many ground-truth pairs per micro-step, drawn at
    /// random. The coarse loss always uses every pair.
    pub fine_seeds: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 8e-3,
            b_ref: 64,
            batch: 4,
            warmup_steps: 50,
            warmup_start: 0.1,
            milestones: vec![],
            gamma_lr: 0.5,
            weight_decay: 0.1,
            betas: [0.9, 0.999],
            eps: 1e-8,
            grad_accum: 1,
            clip: 0.5,
            max_steps: None,
            epochs: 1,
            steps_per_epoch: None,
            stage: TrainStage::Base,
            seed: 0,
            fine_seeds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err("lr", "must be positive"));
        }
        if self.b_ref == 0 {
            return Err(config_err("b_ref", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(config_err("batch", "must be at least 1"));
        }
        if !(self.gamma_lr > 0.0 && self.gamma_lr <= 1.0) {
            return Err(config_err("gamma_lr", "must be in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("milestones", "must be strictly increasing"));
        }
        if !(self.warmup_start > 0.0 && self.warmup_start <= 1.0) {
            return Err(config_err("warmup_start", "must be in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(config_err("betas", "must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err("eps", "must be positive"));
        }
        if self.grad_accum == 0 {
            return Err(config_err("grad_accum", "must be at least 1"));
        }
        if self.fine_seeds == Some(0) {
            return Err(config_err("fine_seeds", "must be at least 1"));
        }
        if !(self.clip > 0.0) {
            return Err(config_err("clip", "must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(config_err("steps_per_epoch", "must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_true(&self) -> f64 {
        self.lr * self.batch as f64 / self.b_ref as f64
    }
}

/// Learning rate at optimizer step `step` in `epoch`.
pub fn lr_at(cfg: &TrainConfig, step: u64, epoch: usize) -> f64 {
    let lr = cfg.lr_true();
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        return lr * (cfg.warmup_start + (1.0 - cfg.warmup_start) * t);
    }
    let decays = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    lr * cfg.gamma_lr.powi(decays as i32)
}

/// AdamW moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps, used for bias correction.
    pub t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One decoupled-decay step over the entries where `trainable` is set.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], trainable: &[bool], cfg: &TrainConfig, lr: f64) {
        assert!(w.len() == g.len() && g.len() == self.m.len() && trainable.len() == w.len());
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for k in 0..w.len() {
            if !trainable[k] {
                continue;
            }
            w[k] -= lr * cfg.weight_decay * w[k];
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            w[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Running mean of micro-batch gradients, released every `grad_accum` adds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub sum: Vec<f64>,
    pub count: usize,
    pub every: usize,
}

impl GradAccumulator {
    pub fn new(n: usize, every: usize) -> Self {
        Self { sum: vec![0.0; n], count: 0, every }
    }

    /// Fold one gradient in. Returns the clipped mean and its pre-clip norm
    /// when the accumulation window is full.
    pub fn push(&mut self, g: &[f64], clip: f64) -> Option<(Vec<f64>, f64)> {
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for (s, &x) in self.sum.iter_mut().zip(g) {
            *s += (x - *s) * inv;
        }
        if self.count < self.every {
            return None;
        }
        let mut out = std::mem::replace(&mut self.sum, vec![0.0; g.len()]);
        self.count = 0;
        let norm = clip_global_norm(&mut out, clip);
        Some((out, norm))
    }
}

/// Rescale `g` to norm `max` if it is longer. Returns the original norm.
pub fn clip_global_norm(g: &mut [f64], max: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// One supervised stereo pair.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    pub f0: AffineFundamental,
    pub sup: Supervision,
}

impl TrainPair {
    pub fn from_scene(scene: &SceneData, cfg: &MatcherConfig, delta_3d: f64) -> Result<Self, TrainError> {
        let (left, right) = scene.images_f64();
        let f0 = affine_fundamental_from_cameras(&scene.cam_l, &scene.cam_r)?;
        let gt = gt_matches(scene, cfg.r_c, delta_3d);
        Ok(Self { left, right, f0, sup: supervision(scene, &gt, cfg, delta_3d) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRecord>,
}

fn fine_subset(seed: u64, step: u64, n: usize, cap: Option<usize>) -> Option<Vec<usize>> {
    let cap = cap.filter(|&c| c < n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(!seed ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    Some(idx)
}

fn pass_order(seed: u64, pass: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Fresh optimizer state for `matcher` in `stage`.
pub fn start_checkpoint(matcher: Matcher, stage: TrainStage) -> Checkpoint {
    let n = flatten(&matcher).len();
    Checkpoint { matcher, adam_m: vec![0.0; n], adam_v: vec![0.0; n], state: TrainState { step: 0, epoch: 0, stage, opt_steps: 0 } }
}

/// Train from `start` until `max_steps` optimizer steps or `epochs` epochs.
/// Resuming from a checkpoint written by an earlier call continues the same
/// trajectory.
pub fn train_toy(start: Checkpoint, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() || pairs.iter().all(|p| p.sup.pairs.is_empty()) {
        return Err(config_err("scenes", "no ground-truth matches in any training pair"));
    }
    let pairs: Vec<&TrainPair> = pairs.iter().filter(|p| !p.sup.pairs.is_empty()).collect();
    if start.state.stage != cfg.stage {
        return Err(config_err("stage", format!("checkpoint is at stage {:?}", start.state.stage)));
    }
    if cfg.stage == TrainStage::Lora && !start.matcher.has_lora() {
        return Err(config_err("stage", "lora stage needs a matcher with adapters attached"));
    }
    let Checkpoint { mut matcher, adam_m, adam_v, mut state } = start;
    let names = map_params(&matcher);
    let trainable: Vec<bool> = names.iter().flat_map(|p| std::iter::repeat(cfg.stage.trainable(&p.name)).take(p.len)).collect();
    let mut opt = AdamW { m: adam_m, v: adam_v, t: state.opt_steps };
    if opt.m.len() != trainable.len() {
        return Err(config_err("checkpoint", "optimizer state does not match the model"));
    }
    let mut acc = GradAccumulator::new(trainable.len(), cfg.grad_accum);
    let (mut sum_c, mut sum_f) = (0.0, 0.0);
    let n = pairs.len() as u64;
    let mut order = pass_order(cfg.seed, state.step / n, pairs.len());
    let mut history = Vec::new();
    let epoch_of = |opt_steps: u64, micro: u64| match cfg.steps_per_epoch {
        Some(spe) => (opt_steps / spe) as usize,
        None => (micro / n) as usize,
    };
    loop {
        state.epoch = epoch_of(state.opt_steps, state.step);
        if cfg.max_steps.is_some_and(|m| state.opt_steps >= m) || state.epoch >= cfg.epochs {
            break;
        }
        if state.step % n == 0 {
            order = pass_order(cfg.seed, state.step / n, pairs.len());
        }
        let pair = pairs[order[(state.step % n) as usize]];
        let opts = LossOptions { fine_subset: fine_subset(cfg.seed, state.step, pair.sup.pairs.len(), cfg.fine_seeds), ..Default::default() };
        let (rep, mut grad) = matcher.loss_and_grad(&pair.left, &pair.right, Some(&pair.f0), state.epoch, &pair.sup, &opts)?;
        Matcher::mask_gradient(&mut grad, cfg.stage);
        let mut bad = None;
        grad.visit("", &mut |name, _, d| {
            if bad.is_none() && d.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(TrainError::NonFinite { name, step: state.opt_steps });
        }
        let epoch = state.epoch;
        state.step += 1;
        let k = acc.count as f64 + 1.0;
        sum_c += (rep.l_c - sum_c) / k;
        sum_f += (rep.l_f - sum_f) / k;
        if let Some((g, norm)) = acc.push(&flatten(&grad), cfg.clip) {
            let lr = lr_at(cfg, state.opt_steps, epoch);
            let mut w = flatten(&matcher);
            opt.step(&mut w, &g, &trainable, cfg, lr);
            assign(&mut matcher, &w);
            history.push(HistoryRecord { step: state.opt_steps, epoch, lr, l_c: sum_c, l_f: sum_f, grad_norm: norm });
            state.opt_steps += 1;
            sum_c = 0.0;
            sum_f = 0.0;
        }
    }
    // A partial accumulation window is discarded so checkpoints sit on step boundaries.
    state.step -= acc.count as u64;
    let AdamW { m, v, .. } = opt;
    Ok(TrainOutcome { checkpoint: Checkpoint { matcher, adam_m: m, adam_v: v, state }, history })
}

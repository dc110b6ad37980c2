use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::{Fusion, MatcherConfig};
use crate::nn::{
    impl_params_for_fields, relu, relu_backward, upsample2x, upsample2x_backward, Conv, FeatureSeq, NnError,
};

/// Three-level strided conv pyramid with an FPN-style top-down decoder.
///
/// `enc[k]` halves the resolution (1/2, 1/4, 1/8). The decoder projects each
/// level to `fpn_dim` with a 1x1 lateral, upsamples the coarser level x2 and
/// fuses. Coarse features are read at 1/`r_c`, fine features at 1/2.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub enc: Vec<Conv>,
    pub lat: Vec<Conv>,
    /// `fuse[0]` produces the 1/2 map, `fuse[1]` the 1/4 map.
    pub fuse: Vec<Conv>,
    pub head_c: Conv,
    pub head_f: Conv,
    pub fusion: Fusion,
    pub r_c: usize,
}

impl_params_for_fields!(ToyEncoder { enc, lat, fuse, head_c, head_f });

#[derive(Debug, Clone)]
pub struct EncoderCache {
    sizes: [(usize, usize); 4],
    enc_cols: Vec<Array2<f64>>,
    enc_pre: Vec<Array2<f64>>,
    /// Encoder outputs at 1/2, 1/4, 1/8.
    feats: Vec<FeatureSeq>,
    fuse_cols: Vec<Array2<f64>>,
    fuse_pre: Vec<Array2<f64>>,
    /// Decoder maps at 1/2, 1/4, 1/8.
    tops: Vec<FeatureSeq>,
}

pub struct EncoderOutput {
    pub coarse: FeatureSeq,
    pub fine: FeatureSeq,
    pub cache: EncoderCache,
}

impl ToyEncoder {
    pub fn init(cfg: &MatcherConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = cfg.enc_channels;
        let f = cfg.fpn_dim;
        let fuse_in = match cfg.fusion {
            Fusion::Add => f,
            Fusion::ConcatConv => 2 * f,
        };
        Self {
            enc: vec![Conv::init(1, c1, 3, 2, rng), Conv::init(c1, c2, 3, 2, rng), Conv::init(c2, c3, 3, 2, rng)],
            lat: vec![Conv::init(c1, f, 1, 1, rng), Conv::init(c2, f, 1, 1, rng), Conv::init(c3, f, 1, 1, rng)],
            fuse: vec![Conv::init(fuse_in, f, 3, 1, rng), Conv::init(fuse_in, f, 3, 1, rng)],
            head_c: Conv::init(f, cfg.d_c, 1, 1, rng),
            head_f: Conv::init(f, cfg.d_f, 1, 1, rng),
            fusion: cfg.fusion,
            r_c: cfg.r_c,
        }
    }

    /// Adapters on every encoder convolution; the decoder stays dense.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) {
        for c in &mut self.enc {
            c.lin.attach_lora(rank, alpha, rng);
        }
    }

    fn combine(&self, up: &FeatureSeq, lat: &FeatureSeq) -> FeatureSeq {
        let data = match self.fusion {
            Fusion::Add => &up.data + &lat.data,
            Fusion::ConcatConv => concatenate![Axis(1), up.data, lat.data],
        };
        FeatureSeq { data, h: up.h, w: up.w }
    }

    /// `image` is a `p x p` grayscale patch, standardized before the first convolution.
    pub fn forward(&self, image: &Array2<f64>) -> Result<EncoderOutput, NnError> {
        let (h, w) = image.dim();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(NnError::Shape(format!("image {h}x{w} is not a multiple of 8")));
        }
        // Zero mean, unit variance per patch.
        let mean = image.mean().unwrap_or(0.0);
        let std = image.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0).sqrt().max(1e-6);
        let norm = image.mapv(|v| (v - mean) / std);
        let x = FeatureSeq::new(norm.to_shape((h * w, 1)).map_err(|e| NnError::Shape(e.to_string()))?.to_owned(), h, w)?;
        let mut sizes = [(h, w); 4];
        let (mut enc_cols, mut enc_pre, mut feats) = (vec![], vec![], vec![]);
        let mut cur = x;
        for (k, conv) in self.enc.iter().enumerate() {
            let (pre, cols) = conv.forward(&cur)?;
            sizes[k + 1] = (pre.h, pre.w);
            let act = FeatureSeq { data: relu(&pre.data), h: pre.h, w: pre.w };
            enc_cols.push(cols);
            enc_pre.push(pre.data);
            feats.push(act.clone());
            cur = act;
        }
        let top3 = self.lat[2].forward(&feats[2])?.0;
        let mut fuse_cols = vec![Array2::zeros((0, 0)); 2];
        let mut fuse_pre = vec![Array2::zeros((0, 0)); 2];
        let mut tops = vec![top3.clone(), top3.clone(), top3];
        for level in [1usize, 0] {
            let lat = self.lat[level].forward(&feats[level])?.0;
            let up = upsample2x(&tops[level + 1]);
            let comb = self.combine(&up, &lat);
            let (pre, cols) = self.fuse[level].forward(&comb)?;
            tops[level] = FeatureSeq { data: relu(&pre.data), h: pre.h, w: pre.w };
            fuse_cols[level] = cols;
            fuse_pre[level] = pre.data;
        }
        let coarse_src = if self.r_c == 4 { &tops[1] } else { &tops[2] };
        let coarse = self.head_c.forward(coarse_src)?.0;
        let fine = self.head_f.forward(&tops[0])?.0;
        Ok(EncoderOutput { coarse, fine, cache: EncoderCache { sizes, enc_cols, enc_pre, feats, fuse_cols, fuse_pre, tops } })
    }

    /// Accumulate parameter gradients given gradients of the coarse and fine outputs.
    pub fn backward(&self, c: &EncoderCache, d_coarse: &Array2<f64>, d_fine: &Array2<f64>, grad: &mut ToyEncoder) {
        let coarse_level = if self.r_c == 4 { 1 } else { 2 };
        let mut d_top: Vec<Array2<f64>> = c.tops.iter().map(|t| Array2::zeros(t.data.dim())).collect();
        d_top[coarse_level] += &self.head_c.backward(&c.tops[coarse_level].data, 0, 0, d_coarse, &mut grad.head_c);
        d_top[0] += &self.head_f.backward(&c.tops[0].data, 0, 0, d_fine, &mut grad.head_f);
        let mut d_feat: Vec<Array2<f64>> = c.feats.iter().map(|t| Array2::zeros(t.data.dim())).collect();
        let f = self.lat[0].lin.d_out();
        for level in [0usize, 1] {
            let (th, tw) = (c.tops[level].h, c.tops[level].w);
            let d_pre = relu_backward(&c.fuse_pre[level], &d_top[level]);
            let d_comb = self.fuse[level].backward(&c.fuse_cols[level], th, tw, &d_pre, &mut grad.fuse[level]);
            let (d_up, d_lat) = match self.fusion {
                Fusion::Add => (d_comb.clone(), d_comb),
                Fusion::ConcatConv => (d_comb.slice(s![.., ..f]).to_owned(), d_comb.slice(s![.., f..]).to_owned()),
            };
            let below = &c.tops[level + 1];
            d_top[level + 1] += &upsample2x_backward(&d_up, below.h, below.w);
            d_feat[level] += &self.lat[level].backward(&c.feats[level].data, 0, 0, &d_lat, &mut grad.lat[level]);
        }
        d_feat[2] += &self.lat[2].backward(&c.feats[2].data, 0, 0, &d_top[2], &mut grad.lat[2]);
        for k in (0..3).rev() {
            let d_pre = relu_backward(&c.enc_pre[k], &d_feat[k]);
            let (ih, iw) = c.sizes[k];
            let d_in = self.enc[k].backward(&c.enc_cols[k], ih, iw, &d_pre, &mut grad.enc[k]);
            if k > 0 {
                d_feat[k - 1] += &d_in;
            }
        }
    }
}

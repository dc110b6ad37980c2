use ndarray::Array2;
use rand::Rng;

use super::{FeatureSeq, Linear, NnError, Params};

/// Patches of a `3x3`, zero-padded convolution as rows.
///
/// Input rows are grid cells (row-major), columns channels. Output row `o`
/// holds the receptive field of output cell `o`, ordered `(ky, kx, channel)`.
pub fn im2col_3x3(x: &FeatureSeq, stride: usize) -> (Array2<f64>, usize, usize) {
    let (h, w, c) = (x.h, x.w, x.dim());
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut cols = Array2::zeros((ho * wo, 9 * c));
    for oy in 0..ho {
        for ox in 0..wo {
            let mut row = cols.row_mut(oy * wo + ox);
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = x.data.row(iy as usize * w + ix as usize);
                    let base = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        row[base + ch] = src[ch];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col_3x3`]: scatter-add patch gradients back onto the input grid.
pub fn col2im_3x3(dcols: &Array2<f64>, h: usize, w: usize, c: usize, stride: usize) -> Array2<f64> {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut dx = Array2::zeros((h * w, c));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = dcols.row(oy * wo + ox);
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let mut dst = dx.row_mut(iy as usize * w + ix as usize);
                    let base = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dst[ch] += row[base + ch];
                    }
                }
            }
        }
    }
    dx
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut d = dy.clone();
    d.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    d
}

/// Source taps for one axis of a x2 bilinear upsample with half-pixel centers.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// x2 bilinear upsampling, half-pixel aligned, edges clamped.
pub fn upsample2x(x: &FeatureSeq) -> FeatureSeq {
    let (ty, tx) = (taps(x.h), taps(x.w));
    let (ho, wo) = (2 * x.h, 2 * x.w);
    let mut out = Array2::zeros((ho * wo, x.dim()));
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let mut dst = out.row_mut(oy * wo + ox);
            for (iy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                for (ix, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        dst.scaled_add(wgt, &x.data.row(iy * x.w + ix));
                    }
                }
            }
        }
    }
    FeatureSeq { data: out, h: ho, w: wo }
}

/// Adjoint of [`upsample2x`] for an `h x w` source grid.
pub fn upsample2x_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ty, tx) = (taps(h), taps(w));
    let wo = 2 * w;
    let mut dx = Array2::zeros((h * w, dy.ncols()));
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let src = dy.row(oy * wo + ox);
            for (iy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                for (ix, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        dx.row_mut(iy * w + ix).scaled_add(wgt, &src);
                    }
                }
            }
        }
    }
    dx
}

/// Convolution as patch extraction followed by a [`Linear`] map, so LoRA
/// adapters attach to convolutions the same way as to dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub lin: Linear,
    /// 1 or 3.
    pub kernel: usize,
    pub stride: usize,
}

impl Params for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.lin.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.lin.visit_mut(prefix, f);
    }
}

impl Conv {
    pub fn init(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = kernel * kernel * c_in;
        Self { lin: Linear::init(c_out, fan_in, true, rng), kernel, stride }
    }

    fn patches(&self, x: &FeatureSeq) -> (Array2<f64>, usize, usize) {
        if self.kernel == 1 {
            assert_eq!(self.stride, 1, "1x1 convolutions are unstrided");
            (x.data.clone(), x.h, x.w)
        } else {
            im2col_3x3(x, self.stride)
        }
    }

    /// Returns the output and the patch matrix needed by [`Conv::backward`].
    pub fn forward(&self, x: &FeatureSeq) -> Result<(FeatureSeq, Array2<f64>), NnError> {
        let want = self.kernel * self.kernel * x.dim();
        if want != self.lin.d_in() {
            return Err(NnError::Shape(format!("conv expects {} input channels", self.lin.d_in() / (self.kernel * self.kernel))));
        }
        let (cols, ho, wo) = self.patches(x);
        let y = self.lin.apply(&cols);
        Ok((FeatureSeq { data: y, h: ho, w: wo }, cols))
    }

    pub fn backward(&self, cols: &Array2<f64>, in_h: usize, in_w: usize, dy: &Array2<f64>, grad: &mut Conv) -> Array2<f64> {
        let dcols = self.lin.backward(cols, dy, &mut grad.lin);
        if self.kernel == 1 {
            dcols
        } else {
            let c = self.lin.d_in() / 9;
            col2im_3x3(&dcols, in_h, in_w, c, self.stride)
        }
    }
}

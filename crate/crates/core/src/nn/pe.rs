use ndarray::Array2;

use super::{FeatureSeq, NnError};

/// DETR-style 2D sinusoidal encoding over an `h x w` grid.
///
/// Channels `[0, d/2)` encode the row and `[d/2, d)` the column. Within each
/// half, channel pairs `(2k, 2k+1)` hold `sin(pos·ω_k), cos(pos·ω_k)` with
/// `ω_k = 10000^(-2k/(d/2))`. Positions are integer cell indices.
pub fn sinusoidal_pe_2d(h: usize, w: usize, d: usize) -> Result<FeatureSeq, NnError> {
    if d == 0 || d % 4 != 0 {
        return Err(NnError::PeDimension(d));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|k| 10000f64.powf(-((2 * k) as f64) / half as f64)).collect();
    let mut data = Array2::zeros((h * w, d));
    for r in 0..h {
        for c in 0..w {
            let mut row = data.row_mut(r * w + c);
            for (k, &om) in freqs.iter().enumerate() {
                row[2 * k] = (r as f64 * om).sin();
                row[2 * k + 1] = (r as f64 * om).cos();
                row[half + 2 * k] = (c as f64 * om).sin();
                row[half + 2 * k + 1] = (c as f64 * om).cos();
            }
        }
    }
    FeatureSeq::new(data, h, w)
}

use ndarray::Array2;

use super::MatcherError;
use crate::Pixel;

const LOG_FLOOR: f64 = 1e-12;
const SIGMA2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLoss {
    pub value: f64,
    /// `(i, j, dL/dP(i, j))` for every pair that entered the mean.
    pub grad: Vec<(usize, usize, f64)>,
    pub used: usize,
    /// Pairs dropped because the matching mask rejects them.
    pub excluded: usize,
}

/// `-(1/|M|) Σ log max(P(i, j), 1e-12)` over the admissible ground-truth pairs.
pub fn coarse_loss(p: &Array2<f64>, gt: &[(usize, usize)], mask: Option<&Array2<bool>>) -> Result<CoarseLoss, MatcherError> {
    let used: Vec<(usize, usize)> = gt.iter().copied().filter(|&(i, j)| mask.map_or(true, |m| m[(i, j)])).collect();
    if used.is_empty() {
        return Err(MatcherError::EmptyLoss(format!("no admissible coarse ground truth among {} pairs", gt.len())));
    }
    let n = used.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(used.len());
    for &(i, j) in &used {
        let v = p[(i, j)];
        value -= v.max(LOG_FLOOR).ln();
        let g = if v > LOG_FLOOR { -1.0 / (n * v) } else { 0.0 };
        grad.push((i, j, g));
    }
    Ok(CoarseLoss { value: value / n, grad, used: used.len(), excluded: gt.len() - used.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineLoss {
    pub value: f64,
    /// `dL/dĵ` per match. The variance weights are held constant.
    pub grad: Vec<[f64; 2]>,
}

/// `(1/|M|) Σ ‖ĵ - ĵ_gt‖² / max(σ², 1e-6)`.
pub fn fine_loss(pred: &[Pixel], target: &[Pixel], sigma2: &[f64]) -> Result<FineLoss, MatcherError> {
    if pred.len() != target.len() || pred.len() != sigma2.len() {
        return Err(MatcherError::EmptyLoss(format!(
            "length mismatch: {} predictions, {} targets, {} variances",
            pred.len(),
            target.len(),
            sigma2.len()
        )));
    }
    if pred.is_empty() {
        return Err(MatcherError::EmptyLoss("no fine matches".into()));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for ((p, t), &s) in pred.iter().zip(target).zip(sigma2) {
        let w = 1.0 / s.max(SIGMA2_FLOOR);
        let (dr, dc) = (p.row - t.row, p.col - t.col);
        value += w * (dr * dr + dc * dc);
        grad.push([2.0 * w * dr / n, 2.0 * w * dc / n]);
    }
    Ok(FineLoss { value: value / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coarse_examples() {
        let p = Array2::from_elem((3, 3), 1.0);
        assert_eq!(coarse_loss(&p, &[(0, 0), (1, 2)], None).unwrap().value, 0.0);
        let p = Array2::from_elem((3, 3), (-1f64).exp());
        assert!((coarse_loss(&p, &[(0, 0), (2, 1)], None).unwrap().value - 1.0).abs() < 1e-15);
        assert!(matches!(coarse_loss(&p, &[], None), Err(MatcherError::EmptyLoss(_))));
    }

    #[test]
    fn coarse_excludes_masked_pairs() {
        let p = Array2::from_elem((2, 2), 0.5);
        let mut m = Array2::from_elem((2, 2), true);
        m[(1, 0)] = false;
        let l = coarse_loss(&p, &[(0, 0), (1, 0)], Some(&m)).unwrap();
        assert_eq!((l.used, l.excluded), (1, 1));
    }

    #[test]
    fn coarse_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.01..1.0));
        let gt: Vec<(usize, usize)> = (0..6).map(|i| (i, (i * 5) % 6)).collect();
        let direct = -gt.iter().map(|&(i, j)| f64::ln(p[(i, j)])).sum::<f64>() / 6.0;
        assert!((coarse_loss(&p, &gt, None).unwrap().value - direct).abs() < 1e-12);
    }

    #[test]
    fn fine_examples() {
        let a = [Pixel::new(1.0, 2.0)];
        assert_eq!(fine_loss(&a, &a, &[0.5]).unwrap().value, 0.0);
        let l = fine_loss(&[Pixel::new(1.0, 1.0)], &[Pixel::new(0.0, 0.0)], &[2.0]).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(matches!(fine_loss(&[], &[], &[]), Err(MatcherError::EmptyLoss(_))));
    }

    #[test]
    fn fine_matches_direct_sum_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<Pixel> = (0..7).map(|_| Pixel::new(rng.gen_range(0.0..9.0), rng.gen_range(0.0..9.0))).collect();
        let tgt: Vec<Pixel> = (0..7).map(|_| Pixel::new(rng.gen_range(0.0..9.0), rng.gen_range(0.0..9.0))).collect();
        let s2: Vec<f64> = (0..7).map(|_| rng.gen_range(0.1..3.0)).collect();
        let direct: f64 =
            (0..7).map(|k| pred[k].distance(&tgt[k]).powi(2) / s2[k]).sum::<f64>() / 7.0;
        let l = fine_loss(&pred, &tgt, &s2).unwrap();
        assert!((l.value - direct).abs() < 1e-12);
        let eps = 1e-6;
        let mut up = pred.clone();
        up[3].col += eps;
        let mut dn = pred.clone();
        dn[3].col -= eps;
        let num = (fine_loss(&up, &tgt, &s2).unwrap().value - fine_loss(&dn, &tgt, &s2).unwrap().value) / (2.0 * eps);
        assert!((num - l.grad[3][1]).abs() < 1e-7);
    }
}

use serde::Serialize;

use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub location: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + eps;
    let up = f(&probe);
    probe[i] = x[i] - eps;
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

/// Compare `analytic` against central differences of `f` at `x` over every coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
) -> Result<GradReport, NnError> {
    let all: Vec<usize> = (0..x.len()).collect();
    gradcheck_at(f, x, analytic, &all, eps, tolerance)
}

/// As [`gradcheck`], restricted to the listed coordinates.
pub fn gradcheck_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    tolerance: f64,
) -> Result<GradReport, NnError> {
    if x.len() != analytic.len() {
        return Err(NnError::Shape(format!("{} parameters but {} gradient entries", x.len(), analytic.len())));
    }
    let mut report =
        GradReport { max_rel_err: 0.0, location: 0, analytic: 0.0, numeric: 0.0, checked: 0, tolerance, passed: true };
    for &i in indices {
        let a = analytic[i];
        let n = central_difference(&mut f, x, i, eps);
        if !a.is_finite() || !n.is_finite() {
            return Err(NnError::NonFinite(format!("coordinate {i} (analytic {a}, numeric {n})")));
        }
        let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        report.checked += 1;
        if rel > report.max_rel_err || report.checked == 1 {
            report.max_rel_err = rel;
            report.location = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_corrupted_gradient_fails() {
        let f = |x: &[f64]| x.iter().map(|v| v * v * v).sum::<f64>();
        let x = [0.5, -1.5, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!(gradcheck(f, &x, &g, 1e-6, 1e-6).unwrap().passed);
        let mut bad = g.clone();
        bad[2] *= 1.01;
        let rep = gradcheck(f, &x, &bad, 1e-6, 1e-6).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.location, 2);
    }

    #[test]
    fn non_finite_is_an_error() {
        let f = |x: &[f64]| 1.0 / x[0];
        assert!(matches!(gradcheck(f, &[0.0], &[1.0], 1e-6, 1e-6), Ok(_) | Err(NnError::NonFinite(_))));
        let g = |_: &[f64]| f64::NAN;
        assert!(matches!(gradcheck(g, &[1.0], &[0.0], 1e-6, 1e-6), Err(NnError::NonFinite(_))));
    }
}

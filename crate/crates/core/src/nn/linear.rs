use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{check_shape, impl_params_for_fields, NnError, Params};

/// Low-rank update `(alpha / r) · B · A` added to a frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r x d_in`.
    pub a: Array2<f64>,
    /// `d_out x r`. Zero at initialization.
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl_params_for_fields!(LoraAdapter { a, b });

impl LoraAdapter {
    pub fn init(d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            a: Array2::from_shape_fn((rank, d_in), |_| rng.gen_range(-bound..bound)),
            b: Array2::zeros((d_out, rank)),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(alpha / r) · B · A`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale()
    }
}

/// `Y = X Wᵀ + b`, optionally with a LoRA adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `d_out x d_in`.
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
    pub lora: Option<LoraAdapter>,
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.w.visit(&super::params_join(prefix, "w"), f);
        self.b.visit(&super::params_join(prefix, "b"), f);
        self.lora.visit(&super::params_join(prefix, "lora"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.w.visit_mut(&super::params_join(prefix, "w"), f);
        self.b.visit_mut(&super::params_join(prefix, "b"), f);
        self.lora.visit_mut(&super::params_join(prefix, "lora"), f);
    }
}

impl Linear {
    pub fn new(w: Array2<f64>, b: Option<Array1<f64>>) -> Self {
        Self { w, b, lora: None }
    }

    /// Uniform in `±1/sqrt(d_in)` for weights and bias.
    pub fn init(d_out: usize, d_in: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Array2::from_shape_fn((d_out, d_in), |_| rng.gen_range(-bound..bound));
        let b = bias.then(|| Array1::from_shape_fn(d_out, |_| rng.gen_range(-bound..bound)));
        Self { w, b, lora: None }
    }

    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) {
        self.lora = Some(LoraAdapter::init(self.d_out(), self.d_in(), rank, alpha, rng));
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.d_in() {
            return Err(NnError::Shape(format!("linear input has {} columns, expected {}", x.ncols(), self.d_in())));
        }
        Ok(self.apply(x))
    }

    /// Forward without the shape check; panics on mismatch.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += b;
        }
        if let Some(l) = &self.lora {
            let h = x.dot(&l.a.t());
            y.scaled_add(l.scale(), &h.dot(&l.b.t()));
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dX`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        if let Some(gb) = grad.b.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        let mut dx = dy.dot(&self.w);
        if let (Some(l), Some(gl)) = (&self.lora, grad.lora.as_mut()) {
            let s = l.scale();
            let h = x.dot(&l.a.t());
            gl.b.scaled_add(s, &dy.t().dot(&h));
            let dh = dy.dot(&l.b) * s;
            gl.a += &dh.t().dot(x);
            dx += &dh.dot(&l.a);
        }
        dx
    }
}

/// `linear_fwd` with explicit weight, bias and input.
pub fn linear_fwd(w: &Array2<f64>, b: Option<&Array1<f64>>, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    check_shape("linear input", (x.nrows(), x.ncols()), (x.nrows(), w.ncols()))?;
    Linear::new(w.clone(), b.cloned()).forward(x)
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

    #[test]
    fn identity_and_zero_input() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        assert_eq!(linear_fwd(&Array2::eye(4), None, &x).unwrap(), x);
        let b = Array1::from(vec![1.0, -2.0]);
        let w = Array2::from_elem((2, 4), 3.0);
        let y = linear_fwd(&w, Some(&b), &Array2::zeros((5, 4))).unwrap();
        for row in y.rows() {
            assert_eq!(row, b);
        }
        assert!(linear_fwd(&w, None, &Array2::zeros((5, 3))).is_err());
    }

    #[test]
    fn zero_b_lora_is_the_frozen_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Linear::init(6, 5, true, &mut rng);
        let x = rand_mat(7, 5, &mut rng);
        let base = layer.forward(&x).unwrap();
        layer.attach_lora(4, 8.0, &mut rng);
        assert_eq!(layer.forward(&x).unwrap(), base);
    }

    #[test]
    fn alpha_scales_the_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = Linear::init(6, 5, false, &mut rng);
        layer.attach_lora(16, 16.0, &mut rng);
        let lora = layer.lora.as_mut().unwrap();
        lora.b = rand_mat(6, 16, &mut rng);
        let full = lora.delta();
        lora.alpha = 8.0;
        let half = lora.delta();
        let err = (&full * 0.5 - &half).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Linear::init(4, 6, true, &mut rng);
        let x = rand_mat(5, 6, &mut rng);
        let r = rand_mat(5, 4, &mut rng);
        let mut grad = zeros_like(&layer);
        let dx = layer.backward(&x, &r, &mut grad);
        let theta = flatten(&layer);
        let rep = gradcheck(
            |t| {
                let mut l = layer.clone();
                assign(&mut l, t);
                (l.forward(&x).unwrap() * &r).sum()
            },
            &theta,
            &flatten(&grad),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        let xs = x.as_slice().unwrap().to_vec();
        let rep = gradcheck(
            |t| (layer.forward(&Array2::from_shape_vec((5, 6), t.to_vec()).unwrap()).unwrap() * &r).sum(),
            &xs,
            dx.as_slice().unwrap(),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn lora_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = Linear::init(4, 6, true, &mut rng);
        layer.attach_lora(3, 8.0, &mut rng);
        layer.lora.as_mut().unwrap().b = rand_mat(4, 3, &mut rng);
        let x = rand_mat(5, 6, &mut rng);
        let r = rand_mat(5, 4, &mut rng);
        let mut grad = zeros_like(&layer);
        layer.backward(&x, &r, &mut grad);
        let lora = layer.lora.clone().unwrap();
        let rep = gradcheck(
            |t| {
                let mut l = layer.clone();
                assign(l.lora.as_mut().unwrap(), t);
                (l.forward(&x).unwrap() * &r).sum()
            },
            &flatten(&lora),
            &flatten(grad.lora.as_ref().unwrap()),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

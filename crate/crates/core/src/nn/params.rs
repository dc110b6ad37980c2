/// Named parameter tensors of a model, visited in a fixed order.
///
/// Gradients live in a structurally identical instance (see [`zeros_like`]),
/// so optimizers and checkpoints can walk both in lockstep by name.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub len: usize,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count<P: Params + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, d| n += d.len());
    n
}

pub fn map_params<P: Params + ?Sized>(p: &P) -> Vec<ParamInfo> {
    let mut out = Vec::new();
    p.visit("", &mut |name, shape, d| {
        out.push(ParamInfo { name: name.to_string(), shape: shape.to_vec(), len: d.len() })
    });
    out
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, d| out.extend_from_slice(d));
    out
}

/// Overwrite all parameters from a flat vector in visit order.
pub fn assign<P: Params + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut at = 0;
    p.visit_mut("", &mut |_, d| {
        d.copy_from_slice(&flat[at..at + d.len()]);
        at += d.len();
    });
    assert_eq!(at, flat.len(), "flat parameter vector has the wrong length");
}

pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, d| d.fill(0.0));
    z
}

macro_rules! impl_params_for_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
                $( self.$field.visit(&$crate::nn::params_join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
                $( self.$field.visit_mut(&$crate::nn::params_join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params_for_fields;

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
}

impl Params for ndarray::Array2<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("parameters are contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("parameters are contiguous"));
    }
}

impl Params for ndarray::Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("parameters are contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("parameters are contiguous"));
    }
}

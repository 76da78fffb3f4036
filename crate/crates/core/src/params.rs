//! Named parameter tensors.
//!
//! Model components keep their parameters in typed structs and expose them
//! through [`Parameters`]. Gradients use the same struct type as the
//! parameters they belong to, so a visit over both yields matching names in
//! matching order. [`ParamStore`] is the flat, name-keyed view used for
//! serialization, optimizer state and finite-difference checks.

use indexmap::IndexMap;

use crate::error::{Error, ParamDiff, Result};
use crate::ops::conv::ConvParams;

/// Visits `(name, dims, values)` for every tensor in a fixed order.
#[allow(clippy::type_complexity)]
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

/// Joins a prefix and a field name with `.`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), &self.weight.shape().dims(), self.weight.data());
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let dims = self.weight.shape().dims();
        f(&join(prefix, "weight"), &dims, self.weight.data_mut());
        let len = self.bias.len();
        f(&join(prefix, "bias"), &[len], &mut self.bias);
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// A structurally identical copy with every value set to zero.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, _, v| v.fill(0.0));
    z
}

/// `dst += src` entry by entry; both must share structure.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) {
    let mut flat = Vec::new();
    src.visit("", &mut |_, _, v| flat.push(v.to_vec()));
    let mut it = flat.into_iter();
    dst.visit_mut("", &mut |_, _, v| {
        let s = it.next().expect("parameter structures differ");
        for (d, x) in v.iter_mut().zip(s) {
            *d += x;
        }
    });
}

pub fn count<P: Parameters>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Insertion-ordered map from parameter name to value and gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, value: Vec<f64>) -> Result<()> {
        let expected: usize = dims.iter().product();
        if expected != value.len() {
            return Err(Error::InvalidShape {
                op: "param_store",
                detail: format!("{name}: dims {dims:?} need {expected} values, got {}", value.len()),
            });
        }
        if self.entries.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let grad = vec![0.0; value.len()];
        self.entries.insert(name.to_string(), Param { dims, value, grad });
        Ok(())
    }

    pub fn from_params<P: Parameters>(p: &P) -> Self {
        let mut store = Self::new();
        p.visit("", &mut |name, dims, v| {
            store
                .insert(name, dims.to_vec(), v.to_vec())
                .expect("parameter names are unique");
        });
        store
    }

    /// Store whose values come from `params` and gradients from `grads`.
    pub fn with_grads<P: Parameters>(params: &P, grads: &P) -> Self {
        let mut store = Self::from_params(params);
        grads.visit("", &mut |name, _, g| {
            if let Some(p) = store.entries.get_mut(name) {
                p.grad.copy_from_slice(g);
            }
        });
        store
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Names and dimensions that differ from the parameter set of `p`.
    pub fn diff<P: Parameters>(&self, p: &P) -> ParamDiff {
        let mut diff = ParamDiff::default();
        let mut seen = Vec::new();
        p.visit("", &mut |name, dims, _| {
            match self.entries.get(name) {
                None => diff.missing.push(name.to_string()),
                Some(e) if e.dims != dims => diff.wrong_dims.push(format!(
                    "{name} (model {dims:?}, store {:?})",
                    e.dims
                )),
                Some(_) => {}
            }
            seen.push(name.to_string());
        });
        diff.unexpected = self
            .entries
            .keys()
            .filter(|k| !seen.contains(k))
            .cloned()
            .collect();
        diff
    }

    /// Copies stored values into `p`, failing on any name or shape mismatch.
    pub fn load_into<P: Parameters>(&self, p: &mut P) -> Result<()> {
        let diff = self.diff(p);
        if !diff.is_empty() {
            return Err(Error::ParamMismatch(diff));
        }
        p.visit_mut("", &mut |name, _, v| {
            v.copy_from_slice(&self.entries[name].value);
        });
        Ok(())
    }
}

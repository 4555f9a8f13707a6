//! Uniform access to the trainable tensors of a model.
//!
//! Every model exposes its tensors in one canonical order. The optimizer,
//! checkpoint format and gradient checker all walk that same order, so a flat
//! vector produced by [`ParamSet::flatten`] is a stable layout.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Kernel;

/// Name, shape and flat offset of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

pub trait ParamSet {
    /// Calls `f(name, shape, values)` for every tensor in canonical order.
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Mutable counterpart of [`ParamSet::visit`], same order.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_len();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, model needs {expected}",
                flat.len()
            )));
        }
        let mut pos = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[pos..pos + v.len()]);
            pos += v.len();
        });
        Ok(())
    }

    fn manifest(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit(&mut |name, shape, v| {
            out.push(TensorInfo {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
                len: v.len(),
            });
            offset += v.len();
        });
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn visit_kernel(prefix: &str, k: &Kernel, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&format!("{prefix}.weight"), &k.weight_shape(), k.weights());
    f(&format!("{prefix}.bias"), &[k.out_channels()], k.bias());
}

pub(crate) fn visit_kernel_mut(prefix: &str, k: &mut Kernel, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(&format!("{prefix}.weight"), k.weights_mut());
    f(&format!("{prefix}.bias"), k.bias_mut());
}

/// Square kernel with weights uniform on `[-b, b]`, `b = sqrt(6 / (k^2 * in))`,
/// and zero bias.
pub(crate) fn fan_in_uniform<R: Rng>(rng: &mut R, k: usize, cin: usize, cout: usize) -> Result<Kernel> {
    let bound = (6.0 / (k * k * cin) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let weights = (0..k * k * cin * cout).map(|_| dist.sample(rng)).collect();
    Kernel::from_parts(k, k, cin, cout, weights, vec![0.0; cout])
}

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors belonging to one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, tensor: Tensor) -> usize {
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub(crate) fn gaussian<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: Vec<usize>,
        std: f64,
    ) -> usize {
        let n = shape.iter().product();
        let data = gaussian_vec(rng, n, std);
        let t = Tensor::new(shape, data).expect("consistent shape").named(name);
        self.push(t)
    }

    pub(crate) fn zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        self.push(Tensor::zeros(shape).named(name))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on the tape: as gradient-carrying leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.shape().to_vec(), t.data().to_vec())
                } else {
                    Ok(tape.constant_tensor(t))
                }
            })
            .collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::invalid("accumulate", "binding does not match parameter set"));
        }
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn scale_grads(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale_grad(factor));
    }

    /// True when any tensor holds a gradient buffer.
    pub fn has_grad_buffers(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    /// Hash over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.name().hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let name = t.name().map(str::to_owned).unwrap_or_else(|| i.to_string());
                (format!("{prefix}{name}"), t.clone())
            })
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs; every existing tensor must be present
    /// with an identical shape.
    pub(crate) fn load_named(&mut self, prefix: &str, source: &[(String, Tensor)]) -> Result<()> {
        for t in self.tensors.iter_mut() {
            let name = format!("{prefix}{}", t.name().unwrap_or_default());
            let (_, src) = source
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

pub(crate) fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

use rand_distr::{Distribution, Normal};

use crate::error::{CtsError, Result};
use crate::tensor::{RngState, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
}

/// Named model state: trainable parameters plus non-trainable buffers
/// (batch-norm running statistics). Insertion order is stable and defines
/// the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.entries.push(Entry { name: name.into(), tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Records every trainable tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| e.tensor.requires_grad().then(|| tape.leaf(e.tensor.clone())))
            .collect();
        Binding { vars }
    }

    /// Binding from externally recorded leaves, one per trainable tensor in
    /// store order.
    pub fn binding_from(&self, trainable_vars: &[Var]) -> Result<Binding> {
        let mut it = trainable_vars.iter();
        let vars: Vec<Option<Var>> = self
            .entries
            .iter()
            .map(|e| if e.tensor.requires_grad() { it.next().copied() } else { None })
            .collect();
        let expected = self.trainable_ids().count();
        if trainable_vars.len() != expected {
            return Err(CtsError::usage(format!(
                "binding expects {} trainable tensors, got {}",
                expected,
                trainable_vars.len()
            )));
        }
        Ok(Binding { vars })
    }

    /// Adds leaf gradients from `tape` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for (e, v) in self.entries.iter_mut().zip(&binding.vars) {
            if let Some(v) = v {
                if let Some(g) = tape.grad(*v) {
                    e.tensor.accumulate_grad(g);
                }
            }
        }
    }

    /// Element type conversion of the whole store.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| {
                    let mut t = e.tensor.cast::<U>();
                    t.set_requires_grad(e.tensor.requires_grad());
                    Entry { name: e.name.clone(), tensor: t }
                })
                .collect(),
        }
    }
}

/// Tape handles of a store's trainable tensors for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is not trainable and has no tape binding")
    }
}

/// Weight initializers.
pub(crate) mod init {
    use super::*;

    /// Kaiming-uniform with ReLU gain: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64((rng.next_f64() * 2.0 - 1.0) * bound))
    }

    /// Xavier-uniform: `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngState) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64((rng.next_f64() * 2.0 - 1.0) * bound))
    }

    pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut RngState) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
    }
}

//! Named parameter storage and per-pass binding onto a [`Graph`].

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is creation order and is what
/// checkpoints and optimizer state follow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))` for a `rows × cols` weight.
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let v = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::matrix(rows, cols, v).expect("shape matches"))
    }

    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let n = shape.iter().product();
        let v = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), v).expect("shape matches"))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![value; n]).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::dim("set_param", self.tensors[id.0].shape(), tensor.shape()));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Registers every tensor on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Parameter variables on one graph, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter in store order; zeros where untouched.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

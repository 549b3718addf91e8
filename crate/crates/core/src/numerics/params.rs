use std::ops::Index;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform `rows × cols` weight.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, xavier_uniform(rows, cols, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every tensor as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// A [`ParamStore`] recorded on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Substitutes another tape value for one parameter.
    pub fn replace(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Uniform on `±√(6 / (rows + cols))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

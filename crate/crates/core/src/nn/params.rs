use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Var};
use super::real::Real;
use super::tensor::Tensor;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered parameter arrays of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    /// Places every parameter on the graph. Frozen parameters are inserted as constants
    /// so no weight gradients are computed for them.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
                .collect(),
        )
    }

    /// Collects gradients for a bound set, substituting zeros for unused parameters.
    pub fn grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.dims())))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Graph handles for a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// `N(0, std²)` initialised tensor.
pub fn normal_tensor<T: Real>(dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = dims.iter().product();
    if std == 0.0 {
        return Tensor::zeros(dims);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(dims, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

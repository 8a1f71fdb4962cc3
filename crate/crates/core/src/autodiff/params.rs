use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order, each with a gradient
/// accumulator of the same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

/// Parameters recorded on one tape, in store order.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    #[inline]
    pub fn get(&self, id: usize) -> Var<'t> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a parameter and return its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Autodiff(format!("duplicate parameter name `{name}`")));
        }
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set(&mut self, id: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id].shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: self.values[id].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id] = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Record every parameter on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Add the gradients of a backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundParams<'_>) {
        for (acc, var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                acc.add_assign(g);
            }
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::Shape {
                op: "ParamStore::unflatten",
                lhs: vec![self.n_scalars()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

impl Tape {
    /// Backward pass that deposits parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var<'_>, bound: &BoundParams<'_>, params: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        params.accumulate(&grads, bound);
        Ok(())
    }
}

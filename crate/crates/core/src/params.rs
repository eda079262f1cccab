//! Named parameter storage and per-step binding onto a tape.

use std::sync::Arc;

use easyfirst_tensor::{Element, Tape, Tensor, Var};
use rand::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named weight tensors. Values are reference counted so binding
/// them onto a tape is free.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Uniform in ±√(6/(fan_in+fan_out)).
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data).expect("xavier shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.values.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.get(id).shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}

/// A tape plus lazily bound parameters for one forward (and backward) pass.
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Element> Session<'a, T> {
    pub fn training(store: &'a ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::new())
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::inference())
    }

    /// Wraps an existing tape, e.g. one driven by a finite-difference check.
    pub fn with_tape(store: &'a ParamStore<T>, tape: Tape<T>) -> Self {
        Session {
            tape,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Routes a parameter to an existing tape variable instead of the
    /// stored value.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Tape handle of a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let grad = self.tape.grad_enabled();
        let v = self.tape.leaf_shared(self.store.shared(id), grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of every parameter after `backward`; `None` for parameters
    /// the pass never touched.
    pub fn param_grads(&mut self) -> Vec<Option<Vec<T>>> {
        let bound = self.bound.clone();
        bound
            .into_iter()
            .map(|v| v.and_then(|v| self.tape.take_grad(v)))
            .collect()
    }
}

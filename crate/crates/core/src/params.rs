//! Named parameter storage and the per-pass binding of parameters onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, NodeId, Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Order is insertion order and defines
/// the checkpoint layout.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Rc::new(value));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor<T>> {
        Rc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.get_mut(id))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::Dimension(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.name(id),
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// First parameter (in store order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, _, v)| !v.is_finite()).map(|(_, n, _)| n)
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `rows×cols` matrix.
    pub fn xavier<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::from_shape_fn(rows, cols, |_, _| T::of(self.rng.random_range(-a..a)))
    }

    pub fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        Tensor::from_shape_fn(rows, cols, |_, _| {
            let z: f64 = self.rng.sample(StandardNormal);
            T::of(z * std)
        })
    }
}

/// Binds parameters from a [`ParamStore`] onto a [`Tape`] for one forward
/// pass. Each parameter becomes a leaf the first time it is used.
pub struct Ctx<'a, T> {
    tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<NodeId>>>,
    track: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `track` controls whether parameter leaves request gradients.
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>, track: bool) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(vec![None; params.len()]),
            track,
        }
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Result<Var<'a, T>> {
        if let Some(node) = self.bound.borrow()[id.0] {
            return Ok(self.tape.handle(node));
        }
        let v = self.tape.leaf(self.params.shared(id), self.track);
        self.bound.borrow_mut()[id.0] = Some(v.id());
        Ok(v)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'a, T> {
        self.tape.constant(value)
    }

    /// Gradient per parameter, aligned with store order. Parameters that did
    /// not take part in the pass get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|slot| slot.and_then(|node| grads.take_id(node)))
            .collect()
    }
}

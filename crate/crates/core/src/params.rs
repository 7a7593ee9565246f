//! Named parameter storage with gradients, optimizer state and
//! normalization statistics.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identifies a store so gradients recorded on a graph find their way back.
/// Clones share the id: a clone is the same logical model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Momentum-SGD velocity.
    pub velocity: Option<Tensor<T>>,
    /// RMSprop or Adam running average of squared gradients.
    pub sq_avg: Option<Tensor<T>>,
    /// Adam updates applied so far.
    pub steps: u64,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: StoreId,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

/// Running-statistic update produced by a train-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub store: StoreId,
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Gradients produced by one backward pass, tagged by owning store.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub(crate) entries: Vec<(StoreId, ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, store: StoreId, id: ParamId) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(s, p, _)| *s == store && *p == id)
            .map(|(_, _, g)| g)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
            buffer_names: HashMap::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter `{name}`");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.names.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad,
            velocity: None,
            sq_avg: None, steps: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_names.contains_key(&name), "duplicate buffer `{name}`");
        self.buffer_names.insert(name.clone(), self.buffers.len());
        self.buffers.push(Buffer { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds gradients belonging to this store into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (store, id, g) in &grads.entries {
            if *store == self.id {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Folds batch statistics into running statistics:
    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>], momentum: T) {
        for up in updates.iter().filter(|u| u.store == self.id) {
            for (buf, batch) in [(up.mean, &up.batch_mean), (up.var, &up.batch_var)] {
                for (r, &b) in self.buffers[buf.0].value.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (T::one() - momentum) * b;
                }
            }
        }
    }

    /// Overwrites values by name from another store's records (used by
    /// checkpoint loading). Every name must exist with a matching shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if let Some(&i) = self.names.get(name) {
            let p = &mut self.params[i];
            if p.value.shape() != value.shape() {
                return Err(Error::shape(name, p.value.shape(), value.shape()));
            }
            p.value = value;
            return Ok(());
        }
        if let Some(&i) = self.buffer_names.get(name) {
            let b = &mut self.buffers[i];
            if b.value.shape() != value.shape() {
                return Err(Error::shape(name, b.value.shape(), value.shape()));
            }
            b.value = value;
            return Ok(());
        }
        Err(Error::Missing(format!("no parameter or buffer named `{name}`")))
    }

    /// Bitwise equality of every parameter and buffer value.
    pub fn values_equal(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits_eq(*y))
            })
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits_eq(*y))
            })
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Bit identity for finite values; NaN never appears in a valid store.
        self == other && self.is_sign_negative() == other.is_sign_negative()
    }
}

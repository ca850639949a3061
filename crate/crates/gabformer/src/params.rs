//! Named parameter storage shared by blocks, the model, the optimizer,
//! and checkpoints.
//!
//! Parameters live outside any tape as plain [`Tensor`] values. A
//! [`Forward`] lazily copies each parameter onto its tape the first time a
//! layer asks for it, so one forward/backward pass binds every used
//! parameter to exactly one tape leaf and gradients can be read back by
//! [`ParamId`].

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat list of named parameters. Names are stable dotted paths
/// (`encoder0.block1.mgsa.q_in.weight`) used as checkpoint record keys.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Deterministic initializer; drawing order is the construction order.
pub struct Init {
    rng: ChaCha12Rng,
}

impl Init {
    pub fn from_seed(seed: u64) -> Self {
        use rand::SeedableRng;
        Init {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Fan-in scaled uniform weights: `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    pub fn kaiming_uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = (1.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }
}

/// One forward pass: a tape plus the lazily bound parameter leaves.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Forward<'a> {
    /// Bind parameters with gradient tracking (training / gradient checks).
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        let bound = vec![None; store.len()];
        Forward {
            tape,
            store,
            bound,
            trainable: true,
        }
    }

    /// Bind parameters as constants (inference).
    pub fn inference(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        let bound = vec![None; store.len()];
        Forward {
            tape,
            store,
            bound,
            trainable: false,
        }
    }

    /// Tape leaf for a parameter, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every store entry, aligned by index; `None` when the
    /// parameter was unused or backward has not run.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| self.tape.grad(v)))
            .collect()
    }

    /// Gradient of a single parameter, if it was bound and backward ran.
    pub fn grad_of(&self, id: ParamId) -> Option<Tensor> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_binds_each_param_once() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::full(vec![2], 3.0));
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let a = fw.param(p);
        let b = fw.param(p);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn grads_flow_back_to_param_ids() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let w = fw.param(p);
        let sq = fw.tape.mul(w, w).unwrap();
        let loss = fw.tape.sum_all(sq).unwrap();
        fw.tape.backward(loss).unwrap();
        let g = fw.grad_of(p).unwrap();
        assert_eq!(g.data(), &[4.0, -2.0]);
    }

    #[test]
    fn same_seed_draws_identical_values() {
        let mut a = Init::from_seed(7);
        let mut b = Init::from_seed(7);
        let ta = a.kaiming_uniform(vec![4, 3], 3);
        let tb = b.kaiming_uniform(vec![4, 3], 3);
        assert_eq!(ta, tb);
    }
}

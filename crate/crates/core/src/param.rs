//! Named trainable parameters and the registry that owns them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Flat registry of every parameter of one model.
///
/// Names are unique path-like strings ("enc.layer3.mix.ff_out.w"). Gradients
/// accumulate (+=) across backward passes until [`ParamStore::zero_grads`].
/// Iteration everywhere follows insertion order, which keeps walks over the
/// registry deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Ids of trainable parameters, in insertion order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .map(ParamId)
            .filter(|id| self.params[id.0].trainable)
            .collect()
    }

    /// Total element count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// FNV-1a hash over the raw bits of the selected parameters. Used by the
    /// freezing tests to show frozen values never move.
    pub fn value_hash(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for id in ids {
            for v in self.params[id.0].value.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Glorot-uniform matrix: U(+-sqrt(6 / (fan_in + fan_out))).
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
}

pub fn zeros_row(n: usize) -> Tensor {
    Tensor::row(vec![0.0; n])
}

pub fn ones_row(n: usize) -> Tensor {
    Tensor::row(vec![1.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_must_be_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![2, 2]), true).unwrap();
        let err = store.add("w", Tensor::zeros(vec![1, 1]), true).unwrap_err();
        assert!(matches!(err, Error::DuplicateParam(_)));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(vec![1, 2]), true).unwrap();
        store.accumulate_grad(id, &[1.0, 2.0]);
        store.accumulate_grad(id, &[0.5, 0.5]);
        assert_eq!(store.grad(id).data(), &[1.5, 2.5]);
        store.zero_grads();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn trainable_walk_follows_insertion_order() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(vec![1, 1]), true).unwrap();
        let b = store.add("b", Tensor::zeros(vec![1, 1]), false).unwrap();
        let c = store.add("c", Tensor::zeros(vec![1, 1]), true).unwrap();
        assert_eq!(store.trainable_ids(), vec![a, c]);
        store.set_trainable(b, true);
        assert_eq!(store.trainable_ids(), vec![a, b, c]);
    }

    #[test]
    fn glorot_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(glorot(&mut r1, 4, 4), glorot(&mut r2, 4, 4));
    }
}

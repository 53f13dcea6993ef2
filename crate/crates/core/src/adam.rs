//! Adam with bias correction and per-group learning rates.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    id: ParamId,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// The group assignment must cover every trainable parameter exactly once;
/// frozen or doubly-assigned parameters are rejected up front.
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(
        store: &ParamStore,
        cfg: AdamConfig,
        groups: Vec<(Vec<ParamId>, f64)>,
    ) -> Result<Self> {
        let mut seen = vec![false; store.len()];
        let mut slots = Vec::new();
        for (ids, lr) in &groups {
            if *lr <= 0.0 {
                return Err(Error::Grouping(format!("learning rate {lr} must be > 0")));
            }
            for &id in ids {
                let p = store.get(id);
                if !p.trainable {
                    return Err(Error::Grouping(format!(
                        "parameter {} is frozen but assigned to a group",
                        p.name
                    )));
                }
                if seen[id.0] {
                    return Err(Error::Grouping(format!(
                        "parameter {} assigned to two groups",
                        p.name
                    )));
                }
                seen[id.0] = true;
                slots.push(Slot {
                    id,
                    lr: *lr,
                    m: vec![0.0; p.value.numel()],
                    v: vec![0.0; p.value.numel()],
                });
            }
        }
        for (id, p) in store.iter() {
            if p.trainable && !seen[id.0] {
                return Err(Error::Grouping(format!(
                    "trainable parameter {} is in no group",
                    p.name
                )));
            }
        }
        Ok(Adam {
            cfg,
            step_count: 0,
            slots,
        })
    }

    /// One bias-corrected update from the accumulated gradients. Does not
    /// zero the gradients; call `store.zero_grads()` when done with them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for slot in &mut self.slots {
            let grad = store.grad(slot.id).data().to_vec();
            let value = store.value_mut(slot.id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                value[i] -= slot.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            if value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(names: &[(&str, bool)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = names
            .iter()
            .map(|(n, trainable)| {
                store
                    .add(n, Tensor::row(vec![1.0, -2.0]), *trainable)
                    .unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn rejects_uncovered_trainable_parameter() {
        let (store, ids) = store_with(&[("a", true), ("b", true)]);
        let err = Adam::new(&store, AdamConfig::default(), vec![(vec![ids[0]], 1e-3)]);
        assert!(matches!(err, Err(Error::Grouping(_))));
    }

    #[test]
    fn rejects_double_assignment() {
        let (store, ids) = store_with(&[("a", true)]);
        let err = Adam::new(
            &store,
            AdamConfig::default(),
            vec![(vec![ids[0]], 1e-3), (vec![ids[0]], 3e-3)],
        );
        assert!(matches!(err, Err(Error::Grouping(_))));
    }

    #[test]
    fn rejects_frozen_member() {
        let (store, ids) = store_with(&[("a", false)]);
        let err = Adam::new(&store, AdamConfig::default(), vec![(vec![ids[0]], 1e-3)]);
        assert!(matches!(err, Err(Error::Grouping(_))));
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // With bias correction the very first update is lr * g / (|g| + eps).
        let (mut store, ids) = store_with(&[("a", true)]);
        let mut adam = Adam::new(&store, AdamConfig::default(), vec![(ids.clone(), 0.01)]).unwrap();
        store.accumulate_grad(ids[0], &[0.5, -0.25]);
        adam.step(&mut store).unwrap();
        let v = store.value(ids[0]).data();
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let (mut store, ids) = store_with(&[("a", true)]);
        let mut adam = Adam::new(&store, AdamConfig::default(), vec![(ids.clone(), 0.05)]).unwrap();
        for _ in 0..500 {
            let g: Vec<f64> = store.value(ids[0]).data().iter().map(|x| 2.0 * x).collect();
            store.accumulate_grad(ids[0], &g);
            adam.step(&mut store).unwrap();
            store.zero_grads();
        }
        for x in store.value(ids[0]).data() {
            assert!(x.abs() < 1e-2, "did not converge: {x}");
        }
    }
}

//! Named trainable parameters with per-parameter optimizer state.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{NisError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    updates: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NisError::contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.slots.len());
        let zeros = Tensor::zeros(value.shape());
        self.slots.push(Slot {
            name: name.clone(),
            value,
            first_moment: zeros.clone(),
            second_moment: zeros,
            updates: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Number of optimizer steps applied to this store.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Bit-exact fingerprint of every parameter value.
    pub fn checksum(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for slot in &self.slots {
            slot.name.hash(&mut hasher);
            for v in slot.value.data() {
                v.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    /// Applies one optimizer step.
    ///
    /// A parameter whose gradient is identically zero is skipped entirely,
    /// moments included, so parameters a step never touched stay put.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64, optimizer: &Optimizer) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NisError::contract(format!("learning rate must be positive, got {lr}")));
        }
        if grads.grads.len() > self.slots.len() {
            return Err(NisError::contract("gradients reference unknown parameters"));
        }
        for (i, g) in grads.grads.iter().enumerate() {
            if g.shape() != self.slots[i].value.shape() {
                return Err(NisError::contract(format!(
                    "gradient shape {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    self.slots[i].name,
                    self.slots[i].value.shape()
                )));
            }
        }
        self.step += 1;
        for (slot, g) in self.slots.iter_mut().zip(&grads.grads) {
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            slot.updates += 1;
            match *optimizer {
                Optimizer::Sgd => {
                    for (w, gv) in slot.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = slot.updates as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = slot.first_moment.data_mut();
                    let v = slot.second_moment.data_mut();
                    let w = slot.value.data_mut();
                    for i in 0..w.len() {
                        let gv = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient for every parameter of one store, zero where unreached.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.slots.iter().map(|s| Tensor::zeros(s.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.scale(factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    /// True when the gradient of `id` has at least one nonzero entry.
    pub fn touches(&self, id: ParamId) -> bool {
        self.grads[id.0].data().iter().any(|&x| x != 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        (s, id)
    }

    #[test]
    fn sgd_step_arithmetic() {
        let (mut s, id) = one_param(1.0);
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).data_mut()[0] = 0.5;
        s.apply_gradients(&g, 0.1, &Optimizer::Sgd).unwrap();
        assert!((s.get(id).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_advances_step_counter() {
        let (mut s, id) = one_param(1.0);
        let g = Gradients::zeros_like(&s);
        s.apply_gradients(&g, 0.1, &Optimizer::default()).unwrap();
        assert_eq!(s.get(id).data()[0], 1.0);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g and v_hat = g^2 after bias correction, so |dw| = lr * |g| / (|g| + eps).
        for g0 in [0.5, 1e-3, 40.0, -7.0] {
            let (mut s, id) = one_param(0.0);
            let mut g = Gradients::zeros_like(&s);
            g.get_mut(id).data_mut()[0] = g0;
            s.apply_gradients(&g, 0.01, &Optimizer::default()).unwrap();
            let moved = s.get(id).data()[0].abs();
            let expected = 0.01 * g0.abs() / (g0.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "g={g0}: {moved}");
            assert!((moved - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let (mut s, _) = one_param(1.0);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[2])).unwrap();
        let g = Gradients::zeros_like(&other);
        assert!(matches!(
            s.apply_gradients(&g, 0.1, &Optimizer::Sgd),
            Err(NisError::Contract(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = one_param(1.0);
        assert!(s.add("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let (mut s, id) = one_param(1.0);
        let before = s.checksum();
        s.get_mut(id).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, s.checksum());
    }
}

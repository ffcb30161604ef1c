//! Named parameter blocks, gradients, and the Adam update rule.
//!
//! Registration order is the canonical block order for checkpoint
//! serialization and hashing, so every component registers its blocks once,
//! deterministically, at construction time.

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::config::hex_string;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Frozen blocks never receive optimizer updates and must hash
    /// identically before and after training.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>, frozen: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter block `{name}`"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen,
        });
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter block `{name}`"));
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter block `{name}`"));
        &mut self.entries[idx].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self.get_mut(name);
        assert_eq!(slot.shape(), value.shape(), "shape change for `{name}`");
        *slot = value;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn zero_block(&mut self, name: &str) {
        self.get_mut(name).fill(0.0);
    }

    /// SHA-256 over the little-endian bytes of one block.
    pub fn block_hash(&self, name: &str) -> String {
        hash_array(self.get(name))
    }

    /// SHA-256 over every block in registration order (names included, so a
    /// renamed block changes the hash even with identical bytes).
    pub fn full_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for v in e.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Hash over the frozen blocks only.
    pub fn frozen_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| e.frozen) {
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for v in e.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub fn hash_array(a: &ArrayD<f64>) -> String {
    let mut hasher = Sha256::new();
    for v in a.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex_string(&hasher.finalize())
}

/// Gaussian init scaled by `gain / sqrt(fan_in)`.
pub fn gaussian_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> ArrayD<f64> {
    let scale = gain / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        rng.sample::<f64, _>(StandardNormal) * scale
    })
}

/// Gradient accumulator keyed by block name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: ArrayD<f64>) {
        match self.map.get_mut(name) {
            Some(g) => *g += &grad,
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (name, grad) in other.map {
            match self.map.get_mut(&name) {
                Some(g) => *g += &grad,
                None => {
                    self.map.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }
}

/// Adam with bias correction; moments are kept per trainable block.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: HashMap<String, ArrayD<f64>>,
    second: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let names = store.trainable_names();
        for name in names {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let value = store.get_mut(&name);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn frozen_blocks_are_not_updated() {
        let mut store = ParamStore::new();
        store.register("w", arr1(&[1.0, 2.0]).into_dyn(), false);
        store.register("table", arr1(&[5.0]).into_dyn(), true);
        let before = store.block_hash("table");

        let mut grads = Gradients::new();
        grads.accumulate("w", arr1(&[0.5, -0.5]).into_dyn());
        grads.accumulate("table", arr1(&[9.0]).into_dyn());
        let mut adam = Adam::new(1e-2);
        adam.update(&mut store, &grads);

        assert_eq!(store.block_hash("table"), before);
        assert_ne!(store.get("w")[[0]], 1.0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut store = ParamStore::new();
        store.register("x", arr1(&[0.0]).into_dyn(), false);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.get("x")[[0]];
            let mut grads = Gradients::new();
            grads.accumulate("x", arr1(&[2.0 * (x - 3.0)]).into_dyn());
            adam.update(&mut store, &grads);
        }
        assert!((store.get("x")[[0]] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn full_hash_is_order_and_name_sensitive() {
        let mut a = ParamStore::new();
        a.register("x", arr1(&[1.0]).into_dyn(), false);
        a.register("y", arr1(&[2.0]).into_dyn(), false);
        let mut b = ParamStore::new();
        b.register("y", arr1(&[2.0]).into_dyn(), false);
        b.register("x", arr1(&[1.0]).into_dyn(), false);
        assert_ne!(a.full_hash(), b.full_hash());
    }
}

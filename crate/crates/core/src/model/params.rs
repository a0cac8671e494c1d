//! Named parameter storage.
//!
//! Parameters live in a `BTreeMap` so every iteration order — binding into a
//! graph, optimizer updates, checkpoint serialization, content hashing — is
//! the same deterministic order.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Arr, Gradients, Graph, Var};

/// Owned, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Arr> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Arr)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Initialize a tensor with N(0, std) entries.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) {
        let mut arr = Arr::zeros(IxDyn(shape));
        for v in arr.iter_mut() {
            // Box-Muller from two uniforms keeps us independent of rand's
            // distribution internals across versions
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        self.map.insert(name.to_string(), arr);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.map.insert(name.to_string(), Arr::from_elem(IxDyn(shape), value));
    }

    /// Bind every parameter into `g` as a leaf (trainable) or constant
    /// (frozen). The returned [`Bound`] resolves names to graph vars.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            let var = if trainable { g.leaf(value.clone()) } else { g.constant(value.clone()) };
            vars.insert(name.clone(), var);
        }
        Bound { vars }
    }

    /// SHA-256 over names, shapes, and little-endian payloads. Two stores
    /// with identical parameters hash identically; any drift changes it.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.map {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Name → graph-var mapping produced by [`ParamStore::bind`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Var for `name`; panics if the parameter does not exist (programmer
    /// error — model code owns its naming scheme).
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Pull gradients for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn hash_changes_with_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.init_normal("w", &[3, 3], 0.02, &mut rng);
        let h1 = a.content_hash();
        let b = a.clone();
        assert_eq!(h1, b.content_hash());
        a.get_mut("w").unwrap()[[0, 0]] += 1e-9;
        assert_ne!(h1, a.content_hash());
    }

    #[test]
    fn bind_respects_trainability() {
        let mut store = ParamStore::new();
        store.init_const("w", &[2], 1.0);
        let mut g = Graph::new();
        let frozen = store.bind(&mut g, false);
        assert!(!g.needs_grad(frozen.var("w")));
        let trainable = store.bind(&mut g, true);
        assert!(g.needs_grad(trainable.var("w")));
    }
}

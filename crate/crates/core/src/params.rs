//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered name → tensor map. Iteration order (lexicographic by name) is the
/// order used for checkpoints and optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts the named tensor on `g` as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Subset of entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }
}

/// FNV-1a over the bytes of `name`, used to give each layer its own stream.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// PRNG stream for `(seed, name)`; independent of the order layers are built in.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

/// He-normal weights: N(0, 2/fan_in), drawn from the stream named after the layer.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = named_rng(seed, name);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(z * std)
    })
}

/// Adds `{prefix}.w` (He-normal, C'×C×k×k) and `{prefix}.b` (zeros) to `store`.
pub fn init_conv<T: Real>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, k: usize, seed: u64) {
    let wname = format!("{prefix}.w");
    let w = he_normal(&[c_out, c_in, k, k], c_in * k * k, seed, &wname);
    store.insert(wname, w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
}

/// Adds `{prefix}.w` (He-normal, C'×C) and `{prefix}.b` (zeros) to `store`.
pub fn init_dense<T: Real>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, seed: u64) {
    let wname = format!("{prefix}.w");
    let w = he_normal(&[c_out, c_in], c_in, seed, &wname);
    store.insert(wname, w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_normal_is_deterministic_per_name() {
        let a: Tensor<f32> = he_normal(&[8, 4, 3, 3], 36, 7, "layer.w");
        let b: Tensor<f32> = he_normal(&[8, 4, 3, 3], 36, 7, "layer.w");
        let c: Tensor<f32> = he_normal(&[8, 4, 3, 3], 36, 7, "other.w");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn he_normal_variance_roughly_two_over_fan_in() {
        let t: Tensor<f64> = he_normal(&[64, 32, 3, 3], 288, 1, "v");
        let n = t.numel() as f64;
        let var = t.data().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var / (2.0 / 288.0) - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn missing_parameter_is_contract_error() {
        let s = ParamStore::<f32>::new();
        assert!(matches!(s.get("x"), Err(Error::Contract(_))));
    }
}

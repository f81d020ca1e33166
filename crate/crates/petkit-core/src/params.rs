//! Named parameters and parameter sets.
//!
//! A [`ParamSet`] is the single owner of every tensor of a model, addressed
//! by hierarchical names such as `stage.0.block.1.conv2.weight`. Frozen
//! parameters (`trainable == false`) are never written to by the optimizer
//! and never receive a gradient buffer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named tensor with a trainable flag and an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Filled by `collect_grads` after a backward pass; `None` while frozen.
    pub grad: Option<Vec<f32>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable,
            grad: None,
        }
    }
}

/// Ordered collection of parameters with name lookup.
///
/// Iteration order is insertion order and is the canonical order for
/// checkpoints and optimizer traversal, so a given build seed always
/// produces byte-identical serialized state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Config(alloc::format!(
                "duplicate parameter name {}",
                param.name
            )));
        }
        let idx = self.params.len();
        self.index.insert(param.name.clone(), idx);
        self.params.push(param);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.params[i]),
            None => None,
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn at(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total element count over parameters selected by `pred`.
    pub fn count_where(&self, mut pred: impl FnMut(&Parameter) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Sets every `trainable` flag from `pred` and clears stale gradients.
    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&Parameter) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p);
            p.grad = None;
        }
    }
}

/// Deterministic generator for a (seed, stream) pair.
///
/// Distinct streams keep independent uses of the same run seed (init, data
/// order, augmentation, ...) from sharing a sequence.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Kaiming-uniform fill for ReLU-family fan-in: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64) as f32;
    uniform_tensor(shape, -bound, bound, rng)
}

/// Tensor with i.i.d. entries drawn from U(lo, hi).
pub fn uniform_tensor(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape/data length agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn insert_rejects_duplicate_names() {
        let mut set = ParamSet::new();
        set.insert(Parameter::new("a", Tensor::zeros(vec![2]), true))
            .unwrap();
        assert!(set
            .insert(Parameter::new("a", Tensor::zeros(vec![2]), true))
            .is_err());
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let a: Vec<f32> = {
            let mut r = seeded_rng(7, 3);
            (0..8).map(|_| r.gen_range(-1.0f32..1.0)).collect()
        };
        let b: Vec<f32> = {
            let mut r = seeded_rng(7, 3);
            (0..8).map(|_| r.gen_range(-1.0f32..1.0)).collect()
        };
        assert_eq!(a, b);
        let c: Vec<f32> = {
            let mut r = seeded_rng(7, 4);
            (0..8).map(|_| r.gen_range(-1.0f32..1.0)).collect()
        };
        assert_ne!(a, c);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = seeded_rng(0, 0);
        let t = kaiming_uniform(vec![16, 4, 3, 3], 4 * 9, &mut rng);
        let bound = libm::sqrtf(6.0 / 36.0);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}

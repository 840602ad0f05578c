//! Named parameter storage shared by models and optimizers.

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered list of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a set, indexed by [`ParamId`].
pub type Bound = [Var];

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a named stream. Streams with different names are
/// independent, so adding a component never perturbs another one's draws.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stream))
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix drawn from U(−1/√fan_in, 1/√fan_in) with a seed derived from its name.
    pub fn push_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape product"))
    }

    pub fn push_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Copy of the set with `θ − step · grad` applied to every tensor.
    pub fn stepped(&self, grads: &[Tensor], step: f64) -> ParamSet {
        let mut out = self.clone();
        for (t, g) in out.tensors.iter_mut().zip(grads) {
            for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
                *v -= step * d;
            }
        }
        out
    }

    /// Overwrites values from another set with identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter sets have different layouts".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("assign", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Hash over names, shapes and exact value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Gradients of all bound parameters after a backward sweep.
pub fn collect_grads(tape: &Tape, bound: &Bound) -> Vec<Tensor> {
    bound.iter().map(|&v| tape.grad(v)).collect()
}

/// Elementwise sum of two gradient lists.
pub fn add_grads(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

pub fn grads_are_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_init_respects_fan_in_bound_and_is_name_seeded() {
        let mut a = ParamSet::new();
        let id = a.push_uniform("w", &[5, 7], 25, 3);
        assert!(a.get(id).data().iter().all(|v| v.abs() <= 0.2));
        let mut b = ParamSet::new();
        b.push_zeros("other", &[2]);
        let id_b = b.push_uniform("w", &[5, 7], 25, 3);
        assert_eq!(a.get(id), b.get(id_b));
        let id_c = b.push_uniform("w2", &[5, 7], 25, 3);
        assert_ne!(a.get(id), b.get(id_c));
    }

    #[test]
    fn fingerprint_tracks_value_bits() {
        let mut p = ParamSet::new();
        let id = p.push_zeros("b", &[3]);
        let before = p.fingerprint();
        p.get_mut(id).data_mut()[1] = -0.0;
        assert_ne!(before, p.fingerprint());
    }
}

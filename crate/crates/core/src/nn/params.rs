use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Ordered collection of named parameter tensors.
///
/// Layers refer to their tensors by index, so a `ParamSet` of gradients with
/// identical layout can be produced with [`ParamSet::zeros_like`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn push_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> usize {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(normal.sample(rng)));
        self.push(name, t)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, idx: usize) -> &ArrayD<T> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ArrayD<T> {
        &mut self.tensors[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.tensors
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(alpha, b);
        }
    }

    /// Flat scalar view used by gradient checks: `(tensor index, element offset)`.
    pub fn flat_get(&self, tensor: usize, offset: usize) -> T {
        self.tensors[tensor].as_slice().expect("standard layout")[offset]
    }

    pub fn flat_set(&mut self, tensor: usize, offset: usize, value: T) {
        self.tensors[tensor].as_slice_mut().expect("standard layout")[offset] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian element bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in t.iter() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex(&hasher.finalize())
    }

    /// Converts element type, e.g. an `f32` training run into an `f64` copy.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::lit(v.as_f64())))
                .collect(),
        }
    }

    /// Prefixes every name, used when several nets share one container.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, &ArrayD<T>)> {
        self.iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f32>::new();
        p.push_normal("w", &[3, 4], 0.1, &mut rng);
        p.push_zeros("b", &[3]);
        let c0 = p.checksum();
        assert_eq!(c0, p.clone().checksum());
        p.flat_set(1, 2, 1.0);
        assert_ne!(c0, p.checksum());
    }

    #[test]
    fn zeros_like_keeps_layout() {
        let mut p = ParamSet::<f64>::new();
        p.push_zeros("a", &[2, 2]);
        let g = p.zeros_like();
        assert!(p.same_layout(&g));
        assert_eq!(g.numel(), 4);
    }
}

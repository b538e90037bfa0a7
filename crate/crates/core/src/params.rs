//! Named parameter storage.
//!
//! Parameters are kept on the `f32` grid (every write rounds) so that the
//! little-endian `f32` checkpoint format stores them exactly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a tensor, rounding it onto the `f32` grid.
    pub fn insert(&mut self, name: impl Into<String>, mut value: Mat) {
        value.round_to_f32();
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::model(format!("missing parameter `{name}`")))
    }

    /// Raw mutable access; callers that write off-grid values (finite
    /// difference probes) must restore them.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// SHA-256 over names and values of every tensor whose name starts with
    /// `prefix`. Used to prove freeze contracts.
    pub fn digest(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, m) in self.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Gaussian initialisation scaled by `1/sqrt(fan_in)`.
    pub fn init_normal(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Mat::from_vec(rows, cols, data));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Mat::filled(rows, cols, value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rounds_to_f32_grid() {
        let mut p = ParamStore::new();
        p.insert("a", Mat::scalar(0.1));
        assert_eq!(p.get("a").unwrap().item(), 0.1f32 as f64);
    }

    #[test]
    fn digest_covers_only_prefix() {
        let mut p = ParamStore::new();
        p.insert("senc.w", Mat::scalar(1.0));
        p.insert("sdec.w", Mat::scalar(2.0));
        let before = p.digest("senc.");
        p.get_mut("sdec.w").unwrap().data_mut()[0] = 3.0;
        assert_eq!(before, p.digest("senc."));
        p.get_mut("senc.w").unwrap().data_mut()[0] = 3.0;
        assert_ne!(before, p.digest("senc."));
    }
}

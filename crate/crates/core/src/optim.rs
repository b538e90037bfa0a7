//! Adam optimiser over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(5.0),
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step_stores(&mut [params], grads);
    }

    /// One joint update of parameters spread over several stores; each
    /// gradient goes to the first store holding its name, and clipping uses
    /// the norm over all of them.
    pub fn step_stores(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, Mat>) {
        self.t += 1;
        let scale = match self.clip {
            Some(c) => {
                let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(store) = stores.iter_mut().find(|s| s.contains(name)) else {
                continue;
            };
            let mut next = store.get(name).expect("checked above").clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            for i in 0..g.len() {
                let gi = g.data()[i] * scale;
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                next.data_mut()[i] -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
            store.insert(name.clone(), next);
        }
    }
}

/// Accumulates gradients over a batch and averages them.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sum: BTreeMap<String, Mat>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: BTreeMap<String, Mat>) {
        for (n, g) in grads {
            match self.sum.get_mut(&n) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.sum.insert(n, g);
                }
            }
        }
        self.count += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mean(mut self) -> BTreeMap<String, Mat> {
        let s = 1.0 / self.count.max(1) as f64;
        for g in self.sum.values_mut() {
            g.scale_assign(s);
        }
        self.sum
    }
}

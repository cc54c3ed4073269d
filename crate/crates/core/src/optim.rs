//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::autograd::{ParamId, ParamStore, Tensor};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let total = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, indexed by parameter id; `None` until first use.
    pub(crate) m: Vec<Option<Tensor>>,
    pub(crate) v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads[&id];
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = store.get_mut(id);
            let m = self.m[id.0].as_ref().unwrap();
            let v = self.v[id.0].as_ref().unwrap();
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }

    /// Moments flattened for serialization, `(id, m, v)` for every touched parameter.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((ParamId(i), m.as_ref()?, v.as_ref()?)))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        if self.m.len() <= id.0 {
            self.m.resize(id.0 + 1, None);
            self.v.resize(id.0 + 1, None);
        }
        self.m[id.0] = Some(m);
        self.v[id.0] = Some(v);
    }
}

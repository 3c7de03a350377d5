//! Named parameter storage, gradient accumulation, and AdamW.

use super::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Handle to a parameter slot. Slots are allocated in registration order,
/// which fixes initialization order and checkpoint layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    trainable: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let slot = self.tensors.len();
        self.by_name.insert(name.clone(), slot);
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(true);
        ParamId(slot)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.trainable[i] = on;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// SHA-256 over names, shapes, and little-endian payloads in slot order.
    /// Bit-exact: used to verify frozen parameters were not touched.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for &v in &t.data {
                h.update(v.to_le_bytes_vec());
            }
        }
        hex_string(&h.finalize())
    }

    /// Hash restricted to parameters whose name starts with `prefix`.
    pub fn content_hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            for &v in &t.data {
                h.update(v.to_le_bytes_vec());
            }
        }
        hex_string(&h.finalize())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-slot gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new(len: usize) -> Self {
        GradStore {
            slots: (0..len).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, slot: usize, g: Tensor<F>) {
        match &mut self.slots[slot] {
            Some(t) => {
                debug_assert_eq!(t.dims(), g.dims());
                for (a, b) in t.data.iter_mut().zip(g.data) {
                    *a += b;
                }
            }
            none => *none = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.slots[id.0].as_ref()
    }

    /// Add another gradient set (used to fold per-sequence gradients in
    /// deterministic batch order).
    pub fn merge(&mut self, other: GradStore<F>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (slot, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(slot, g);
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.slots.iter_mut().flatten() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|t| t.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in self.slots.iter().flatten() {
            for &v in &t.data {
                acc += v.as_f64() * v.as_f64();
            }
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, store_len: usize) -> Self {
        Adam {
            cfg,
            m: (0..store_len).map(|_| None).collect(),
            v: (0..store_len).map(|_| None).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable slot that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradStore<F>) {
        self.t += 1;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let lr = F::from_f64(self.cfg.lr);
        let wd = F::from_f64(self.cfg.weight_decay);
        let c1 = F::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = F::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let slot = id.0;
            let p = store.tensor_mut(id);
            let m = self.m[slot].get_or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            let v = self.v[slot].get_or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (F::one() - b1) * gj;
                v.data[j] = b2 * v.data[j] + (F::one() - b2) * gj * gj;
                let mhat = m.data[j] / c1;
                let vhat = v.data[j] / c2;
                let pj = p.data[j];
                p.data[j] = pj - lr * (mhat / (vhat.sqrt() + eps) + wd * pj);
            }
        }
    }
}

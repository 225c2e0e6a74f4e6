//! Named parameter storage, tape binding, and the AdamW optimizer.
//!
//! Parameters live outside any tape as flat `f64` arrays. Each training step
//! binds them into a fresh [`Tape`] as leaves via a [`Binder`]; after
//! `backward`, leaf gradients are collected by entry index, summed across a
//! batch in a fixed order, and applied by [`AdamW`]. A parameter is created
//! on first bind with its declared initializer, so creation order (and hence
//! the RNG stream) is fixed by the model's bind order.

use crate::tensor::{Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Copy, Clone, Debug)]
pub enum Init {
    XavierUniform,
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// AdamW first/second moment estimates.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Insertion-ordered collection of named parameters.
#[derive(Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore { entries: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Store pre-populated with explicit values (checkpoint loading and the
    /// finite-difference harness, which replays perturbed parameter data).
    pub fn from_entries(entries: Vec<(String, Vec<usize>, Vec<f64>)>) -> ParamStore {
        let mut store = ParamStore::new(0);
        for (name, shape, data) in entries {
            let n: usize = shape.iter().product();
            assert_eq!(data.len(), n, "entry {} data length {} vs shape {:?}", name, data.len(), shape);
            store.index.insert(name.clone(), store.entries.len());
            store.entries.push(ParamEntry { name, shape, data, m: vec![0.0; n], v: vec![0.0; n] });
        }
        store
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn get_or_create(&mut self, name: &str, shape: &[usize], init: Init) -> (usize, Vec<f64>) {
        if let Some(&i) = self.index.get(name) {
            assert_eq!(
                self.entries[i].shape, shape,
                "parameter {} rebound with shape {:?}, was {:?}",
                name, shape, self.entries[i].shape
            );
            return (i, self.entries[i].data.clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::XavierUniform => {
                // fan_in/fan_out from the last two dims; vectors fall back to n.
                let (fi, fo) = if shape.len() >= 2 {
                    (shape[shape.len() - 2], shape[shape.len() - 1])
                } else {
                    (n, n)
                };
                let bound = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                (0..n).map(|_| self.rng.sample::<f64, _>(rand_distr::StandardNormal) * std).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
        };
        let i = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.clone(),
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name.to_string(), i);
        (i, data)
    }
}

enum StoreRef<'a> {
    /// Creates parameters on first use.
    Mut(&'a mut ParamStore),
    /// Shared store after initialization; missing parameters panic.
    Shared(&'a ParamStore),
}

/// Binds store parameters into one tape as gradient-tracked leaves.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    store: StoreRef<'a>,
    bound: Vec<(usize, TensorId)>,
    memo: HashMap<String, TensorId>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore) -> Binder<'a> {
        Binder { tape, store: StoreRef::Mut(store), bound: Vec::new(), memo: HashMap::new() }
    }

    /// Binder over an immutable store (parallel forward passes); every
    /// parameter must already exist.
    pub fn read_only(tape: &'a mut Tape, store: &'a ParamStore) -> Binder<'a> {
        Binder { tape, store: StoreRef::Shared(store), bound: Vec::new(), memo: HashMap::new() }
    }

    /// Returns the tape leaf for `name`, creating the parameter on first use.
    /// Repeated calls with the same name return the same leaf.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> TensorId {
        if let Some(&id) = self.memo.get(name) {
            return id;
        }
        let (idx, data) = match &mut self.store {
            StoreRef::Mut(store) => store.get_or_create(name, shape, init),
            StoreRef::Shared(store) => {
                let idx = store
                    .index_of(name)
                    .unwrap_or_else(|| panic!("parameter {} missing from initialized store", name));
                (idx, store.entries[idx].data.clone())
            }
        };
        let id = self.tape.leaf(data, shape);
        self.bound.push((idx, id));
        self.memo.insert(name.to_string(), id);
        id
    }

    /// (store entry index, tape id) pairs in bind order.
    pub fn bound(&self) -> &[(usize, TensorId)] {
        &self.bound
    }
}

/// Gradients aligned with store entries; unused parameters contribute zeros.
pub fn collect_grads(tape: &Tape, bound: &[(usize, TensorId)], store: &ParamStore) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
    for &(idx, id) in bound {
        if let Some(g) = tape.grad(id) {
            for (acc, v) in grads[idx].iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
    grads
}

pub fn add_grads(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step_count: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (entry, g) in store.entries.iter_mut().zip(grads) {
            for i in 0..entry.data.len() {
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g[i];
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                entry.data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * entry.data[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_bind_creates_later_binds_reuse() {
        let mut store = ParamStore::new(7);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, &mut store);
        let w1 = b.param("w", &[2, 2], Init::XavierUniform);
        let w2 = b.param("w", &[2, 2], Init::XavierUniform);
        assert_eq!(w1, w2);
        let first = tape.data(w1).to_vec();

        let mut tape2 = Tape::new();
        let mut b2 = Binder::new(&mut tape2, &mut store);
        let w3 = b2.param("w", &[2, 2], Init::XavierUniform);
        assert_eq!(tape2.data(w3), first.as_slice());
    }

    #[test]
    fn creation_is_deterministic_in_seed() {
        let make = || {
            let mut store = ParamStore::new(3);
            store.get_or_create("a", &[4], Init::Normal(0.5));
            store.get_or_create("b", &[2, 3], Init::XavierUniform);
            store.entries()[1].data.clone()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn grad_clip_scales_to_max_norm() {
        let mut grads = vec![vec![3.0, 4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let new_norm: f64 = grads[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_decoupled_decay_with_zero_grads() {
        let mut store = ParamStore::new(1);
        store.get_or_create("w", &[2], Init::Const(2.0));
        let mut opt = AdamW::new(0.1, 0.01);
        let grads = vec![vec![0.0, 0.0]];
        opt.step(&mut store, &grads);
        for &v in &store.entries()[0].data {
            assert!((v - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_descends_on_quadratic() {
        let mut store = ParamStore::new(1);
        store.get_or_create("x", &[1], Init::Const(1.0));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..200 {
            let x = store.entries()[0].data[0];
            let grads = vec![vec![2.0 * x]];
            opt.step(&mut store, &grads);
        }
        assert!(store.entries()[0].data[0].abs() < 0.05);
    }
}

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot/Xavier uniform over the first two extents.
    Xavier,
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named leaf tensors in registration order. Registration order is the
/// checkpoint order, so it must not depend on hashing.
#[derive(Clone, Debug)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns the existing parameter (checking its shape) or registers a new one.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if let Some(&id) = self.index.get(name) {
            let have = self.entries[id.0].value.shape();
            if have != shape {
                return Err(Error::shape("ParamStore::get_or_init", format!("`{name}` is {have:?}, expected {shape:?}")));
            }
            return Ok(id);
        }
        let value = self.sample(shape, init);
        Ok(self.insert(name, value, true))
    }

    /// Registers a tensor that is never updated by an optimizer (e.g. normalisation statistics).
    pub fn insert_buffer(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        let id = self.insert(name, value, false);
        self.entries[id.0].trainable = false;
        id
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.entries[id.0].value = value;
            return id;
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        self.index.insert(name.to_string(), id);
        id
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| S::lit(self.rng.gen_range(-limit..limit))).collect()
            }
            Init::Uniform(limit) => (0..n).map(|_| S::lit(self.rng.gen_range(-limit..limit))).collect(),
        };
        Tensor::new(shape.to_vec(), data).expect("extent product matches")
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(self.value(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Buffers registered with [`ParamStore::insert_buffer`] stay frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) && !is_buffer_name(&e.name) {
                e.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.trainable = false;
        }
    }

    /// Copies every entry of `other` into `self`, overwriting same-named values.
    pub fn merge(&mut self, other: &ParamStore<S>) {
        for e in &other.entries {
            self.insert(&e.name, e.value.clone(), e.trainable);
        }
    }

    /// A store holding only the entries whose names start with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore<S> {
        let mut out = ParamStore { entries: Vec::new(), index: HashMap::new(), rng: self.rng.clone() };
        for e in &self.entries {
            if prefixes.iter().any(|p| e.name.starts_with(p)) {
                out.insert(&e.name, e.value.clone(), e.trainable);
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Buffers are named with a `.stats.` path component.
pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.contains(".stats.")
}

/// Per-parameter gradient accumulators, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<S>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients<S>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    pub fn scale(&mut self, k: S) {
        for t in self.slots.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn global_norm(&self) -> S {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: S) -> S {
        let norm = self.global_norm();
        if norm > max_norm && norm > S::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_or_init_reuses_and_checks_shape() {
        let mut store = ParamStore::<f64>::new(1);
        let a = store.get_or_init("w", &[2, 3], Init::Xavier).unwrap();
        let b = store.get_or_init("w", &[2, 3], Init::Zeros).unwrap();
        assert_eq!(a, b);
        assert!(store.get_or_init("w", &[3, 2], Init::Zeros).is_err());
        assert!(store.value(a).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn same_seed_same_init() {
        let mut s1 = ParamStore::<f64>::new(9);
        let mut s2 = ParamStore::<f64>::new(9);
        let a = s1.get_or_init("w", &[4, 4], Init::Xavier).unwrap();
        let b = s2.get_or_init("w", &[4, 4], Init::Xavier).unwrap();
        assert_eq!(s1.value(a), s2.value(b));
    }

    #[test]
    fn buffers_stay_frozen() {
        let mut store = ParamStore::<f64>::new(0);
        store.get_or_init("enc.w", &[1], Init::Ones).unwrap();
        store.insert_buffer("enc.stats.mean", Tensor::scalar(0.0));
        store.freeze_all();
        store.set_trainable("enc", true);
        assert!(store.is_trainable(store.id("enc.w").unwrap()));
        assert!(!store.is_trainable(store.id("enc.stats.mean").unwrap()));
    }

    #[test]
    fn gradients_accumulate_and_clip() {
        let mut g = Gradients::<f64>::new();
        g.accumulate(ParamId(1), &Tensor::row_vector(vec![3.0, 0.0]));
        g.accumulate(ParamId(1), &Tensor::row_vector(vec![0.0, 4.0]));
        assert_eq!(g.get(ParamId(1)).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(ParamId(0)).is_none());
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}

//! Parameter storage and the per-graph binding scope.
//!
//! Parameters live in a [`ParamStore`] as shared, immutable-between-steps
//! buffers, so a trained model is `Send + Sync` and can be read from many
//! inference threads. A [`Scope`] binds parameters into one thread's graph:
//! trainable parameters become gradient-tracking leaves, everything else is a
//! constant, which is how stage freezing is enforced.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{numel, Tensor};
use crate::error::{Result, SluError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        if numel(shape) != value.len() {
            return Err(SluError::Shape { op: "param", lhs: shape.to_vec(), rhs: vec![value.len()] });
        }
        if self.find(name).is_some() {
            return Err(SluError::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param { name: name.to_owned(), shape: shape.to_vec(), value: Arc::new(value) });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Mutable access to a parameter buffer. Copies only if a graph still
    /// holds a reference to the current value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.len() != p.value.len() {
            return Err(SluError::Shape { op: "set_value", lhs: p.shape.clone(), rhs: vec![value.len()] });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Ids of every parameter whose name starts with one of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> ParamSet {
        ParamSet(
            self.iter()
                .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
                .map(|(id, _)| id)
                .collect(),
        )
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamSet(pub BTreeSet<ParamId>);

impl ParamSet {
    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: &ParamSet) -> ParamSet {
        ParamSet(self.0.union(&other.0).copied().collect())
    }
}

/// Accumulated gradients, one optional buffer per parameter.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        GradStore { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

/// Binds parameters into the current thread's graph.
pub struct Scope<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a ParamSet>,
    leaves: RefCell<Vec<Option<Tensor>>>,
    train: bool,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'a> Scope<'a> {
    /// Inference scope: no gradients, dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Scope { store, trainable: None, leaves: RefCell::new(vec![None; store.len()]), train: false, rng: None }
    }

    /// Training scope: members of `trainable` track gradients and dropout is
    /// driven by `rng`.
    pub fn train(store: &'a ParamStore, trainable: &'a ParamSet, rng: ChaCha8Rng) -> Self {
        Scope {
            store,
            trainable: Some(trainable),
            leaves: RefCell::new(vec![None; store.len()]),
            train: true,
            rng: Some(RefCell::new(rng)),
        }
    }

    /// Gradient-tracking scope with dropout disabled (used by gradient checks).
    pub fn frozen_eval(store: &'a ParamStore, trainable: &'a ParamSet) -> Self {
        Scope {
            store,
            trainable: Some(trainable),
            leaves: RefCell::new(vec![None; store.len()]),
            train: false,
            rng: None,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                let p = self.store.get(id);
                let grad = self.trainable.is_some_and(|t| t.contains(id));
                Tensor::shared_leaf(Arc::clone(&p.value), &p.shape, grad)
            })
            .clone()
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        match &self.rng {
            Some(rng) if self.train => x.dropout(p, true, &mut *rng.borrow_mut()),
            _ => Ok(x.clone()),
        }
    }

    /// Runs `f` with the scope's random stream; `None` outside training.
    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> Option<T> {
        self.rng.as_ref().map(|r| f(&mut r.borrow_mut()))
    }

    pub fn random_f64(&self) -> Option<f64> {
        self.with_rng(|r| r.random::<f64>())
    }

    /// Parameters bound into this scope so far.
    pub fn used(&self) -> Vec<ParamId> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// The bound leaf for `id`, if any.
    pub fn leaf(&self, id: ParamId) -> Option<Tensor> {
        self.leaves.borrow()[id.0].clone()
    }

    /// Adds leaf gradients into `grads`. Trainable parameters that were bound
    /// but received no gradient contribute zeros, so they are never "missing".
    pub fn collect_grads(&self, grads: &mut GradStore) {
        for (i, leaf) in self.leaves.borrow().iter().enumerate() {
            let Some(leaf) = leaf else { continue };
            if !leaf.requires_grad() {
                continue;
            }
            match leaf.grad() {
                Some(g) => grads.accumulate(ParamId(i), &g),
                None => grads.accumulate(ParamId(i), &vec![0.0; leaf.numel()]),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", &[2], vec![1.0, 2.0]).unwrap();
        let b = s.add("dec.w", &[2], vec![3.0, 4.0]).unwrap();
        (s, a, b)
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let (s, a, b) = store();
        let trainable = s.select(&["enc."]);
        let scope = Scope::train(&s, &trainable, ChaCha8Rng::seed_from_u64(0));
        let loss = scope.param(a).mul(&scope.param(b)).unwrap().sum();
        loss.backward().unwrap();
        let mut grads = GradStore::new(&s);
        scope.collect_grads(&mut grads);
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn binding_is_cached_and_shares_storage() {
        let (s, a, _) = store();
        let scope = Scope::eval(&s);
        let x = scope.param(a);
        assert!(x.same_node(&scope.param(a)));
        assert!(Arc::ptr_eq(x.shared_data(), &s.get(a).value));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _, _) = store();
        assert!(s.add("enc.w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let (s, a, b) = store();
        let mut g = GradStore::new(&s);
        g.accumulate(a, &[3.0, 0.0]);
        g.accumulate(b, &[0.0, 4.0]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}

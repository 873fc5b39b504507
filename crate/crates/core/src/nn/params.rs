//! Named parameter storage and the per-step graph that binds it to a tape.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All tensors of one model stream, addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad())
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].set_requires_grad(flag);
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    /// SHA-256 over names, shapes and values of the selected parameters.
    pub fn digest(&self, mut select: impl FnMut(ParamId, &str, &Tensor) -> bool) -> String {
        let mut h = Sha256::new();
        // name order, so a reloaded checkpoint hashes like the live store
        let mut picked: Vec<_> = self.iter().filter(|(id, n, t)| select(*id, n, t)).collect();
        picked.sort_by(|a, b| a.1.cmp(b.1));
        for (_, name, t) in picked {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn trainable_digest(&self) -> String {
        self.digest(|_, _, t| t.requires_grad())
    }

    /// Copies values of every trainable tensor from `src` (same layout),
    /// blending as `self = m * self + (1 - m) * src`.
    pub fn follow(&mut self, src: &ParamStore, momentum: f64) -> Result<()> {
        if src.names != self.names {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        for id in src.trainable().collect::<Vec<_>>() {
            let from = src.get(id).data();
            let to = self.tensors[id.0].data_mut();
            if momentum == 0.0 {
                to.copy_from_slice(from);
            } else {
                to.iter_mut().zip(from).for_each(|(t, f)| *t = momentum * *t + (1.0 - momentum) * f);
            }
        }
        Ok(())
    }

    pub fn count(&self, mut select: impl FnMut(&str, &Tensor) -> bool) -> usize {
        self.iter().filter(|(_, n, t)| select(n, t)).map(|(_, _, t)| t.numel()).sum()
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct ParamGrads {
    grads: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(i, g)| (*i, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One forward/backward pass over a [`ParamStore`]: each parameter is bound
/// to the tape at most once, so shared tensors collect a single summed
/// gradient.
pub struct Graph<'p> {
    pub tape: Tape<'p>,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    pub fn no_grad(store: &'p ParamStore) -> Self {
        Self { tape: Tape::no_grad(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every bound trainable parameter. Parameters that were
    /// bound but not reached by `loss` get an explicit zero gradient.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut g: Gradients = self.tape.backward(loss)?;
        let mut grads = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            let t = self.store.get(ParamId(i));
            if !t.requires_grad() || !self.tape.grad_enabled() {
                continue;
            }
            let gv = g.take(v).unwrap_or_else(|| vec![0.0; t.numel()]);
            grads.push((ParamId(i), gv));
        }
        Ok(ParamGrads { grads })
    }
}

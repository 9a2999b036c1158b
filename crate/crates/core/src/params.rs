//! Named parameter registry shared by all model modules.
//!
//! Modules register their tensors once at construction time and keep
//! [`ParamId`] handles. A [`Binding`] lazily copies parameters onto a tape
//! as they are touched by a forward pass, registering trainable entries as
//! gradient leaves and frozen entries as plain inputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Param {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count over trainable tensors.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.entries {
            p.tensor.grad = None;
        }
    }

    /// Pull gradients off a finished tape into the `grad` field of every
    /// trainable parameter that was bound. Unbound or unreached parameters
    /// get zeros so optimizers see a consistent view.
    pub fn collect_grads(&mut self, tape: &Tape<F>, binding: &Binding) {
        for (i, p) in self.entries.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = binding.slots[i]
                .and_then(|v| tape.grad(v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::zero(); p.tensor.numel()]);
            p.tensor.grad = Some(g);
        }
    }
}

/// Lazy store-to-tape binding for one forward pass.
pub struct Binding {
    slots: Vec<Option<Var>>,
    track_grads: bool,
}

impl Binding {
    /// Trainable parameters become gradient leaves.
    pub fn train<F: Scalar>(store: &ParamStore<F>) -> Self {
        Binding {
            slots: vec![None; store.len()],
            track_grads: true,
        }
    }

    /// Everything enters as a plain input (inference).
    pub fn frozen<F: Scalar>(store: &ParamStore<F>) -> Self {
        Binding {
            slots: vec![None; store.len()],
            track_grads: false,
        }
    }

    pub fn var<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        id: ParamId,
    ) -> Var {
        if let Some(v) = self.slots[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = if self.track_grads && p.trainable {
            tape.param(&p.tensor)
        } else {
            tape.input(&p.tensor)
        };
        self.slots[id.0] = Some(v);
        v
    }
}

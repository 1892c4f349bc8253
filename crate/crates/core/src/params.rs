//! Named parameter storage shared by layers, the optimizer and checkpoints.

use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but are not trained.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape handles for every entry of a [`ParamStore`], valid for one forward pass.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Record every entry as a tape leaf. Only trainable entries require
    /// gradients, and only when `requires_grad` is set.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), requires_grad && e.trainable))
            .collect();
        Bindings { vars }
    }

    /// Trainable gradients in store order.
    pub fn trainable_grads<'g>(&self, bindings: &Bindings, grads: &'g Gradients<T>) -> Vec<&'g Tensor<T>> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| grads.get(bindings.vars[i]).expect("trainable parameter has a gradient"))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| &mut e.value)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

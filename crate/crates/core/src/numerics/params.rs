use std::collections::HashMap;

use super::float::Float;
use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F: Float> {
    pub name: String,
    pub value: Tensor<F>,
    pub frozen: bool,
}

/// Named, insertion-ordered collection of learnable tensors with freeze flags.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Float> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes every parameter, then unfreezes those whose name satisfies `trainable`.
    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.frozen = !trainable(&e.name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = false);
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Records every parameter on `graph`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.frozen {
                    graph.constant(e.value.clone())
                } else {
                    graph.param(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant, for gradient-free evaluation.
    pub fn bind_constant<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        Bound {
            vars: self.entries.iter().map(|e| graph.constant(e.value.clone())).collect(),
        }
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
pub struct Bound<'g, F: Float> {
    vars: Vec<Var<'g, F>>,
}

impl<'g, F: Float> Bound<'g, F> {
    pub fn var(&self, id: ParamId) -> Var<'g, F> {
        self.vars[id.0]
    }

    /// Accumulated gradients, one slot per parameter (`None` when frozen or unreached).
    pub fn grads(&self) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

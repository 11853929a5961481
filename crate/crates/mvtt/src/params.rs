//! Named parameter storage shared by the model, optimizer and checkpoints.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map of dotted parameter names to tensors. Insertion order is the
/// manifest order of the checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                tensor,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{}'", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn total_trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Tape handles for one forward pass: every trainable parameter registered
/// as a requires-grad leaf, in parameter-set order.
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Binding {
        let mut vars = IndexMap::new();
        for (name, p) in params.iter() {
            if p.trainable {
                vars.insert(name.clone(), tape.leaf(p.tensor.clone(), true));
            }
        }
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{}'", name))
    }

    /// Collect gradients after backward; parameters the loss never reached
    /// get zero gradients.
    pub fn grads(&self, tape: &Tape, params: &ParamSet) -> IndexMap<String, Vec<f64>> {
        let mut out = IndexMap::new();
        for (name, var) in &self.vars {
            let g = match tape.grad(*var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; params.get(name).map(|t| t.numel()).unwrap_or(0)],
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

//! Flat, name-addressed parameter storage.
//!
//! Models keep indices into a [`ParamStore`]; optimizers and checkpoints see
//! only the flat list. Names are dotted paths such as `blocks.2.mlp.down.w`.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a parameter is, for optimizer routing and weight-decay policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// A 2-D weight matrix; the tensor subject to the noise/WD equilibrium.
    Matrix,
    /// A learnable scalar, row or column multiplier.
    Multiplier,
    /// Any other vector parameter (norm weights, conv kernels, biases, SSM
    /// decay and skip scales).
    Vector,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Layer role tag such as `mlp.down`, `attn.q` or `projector`.
    pub role: String,
    /// Frozen parameters enter the graph as constants.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a parameter and returns its id. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
        role: impl Into<String>,
        trainable: bool,
    ) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            kind,
            role: role.into(),
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn as_slice(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Number of trainable multiplier entries.
    pub fn multiplier_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Multiplier)
            .map(|p| p.value.len())
            .sum()
    }

    /// Puts every parameter into `g`, trainable ones as gradient leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }
}

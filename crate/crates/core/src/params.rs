//! Named, grouped parameter storage shared by the backbone and MoE blocks.

use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Moe,
    Classifier,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Closed interval the value is projected onto after each optimizer step.
    pub clamp: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            clamp: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_clamped(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: ParamGroup,
        clamp: (f64, f64),
    ) -> ParamId {
        let id = self.add(name, value, group);
        self.params[id.0].clamp = Some(clamp);
        id
    }

    pub fn add_norm(&mut self, prefix: &str, dim: usize, group: ParamGroup) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), Tensor::full(&[dim], T::one()), group),
            bias: self.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Drops parameters whose `keep` flag is false; returns the new id of
    /// every old id.
    pub fn compact(&mut self, keep: &[bool]) -> Vec<Option<ParamId>> {
        let mut map = Vec::with_capacity(self.params.len());
        let mut next = 0;
        for &k in keep.iter().chain(std::iter::repeat(&false)).take(self.params.len()) {
            map.push(k.then(|| {
                next += 1;
                ParamId(next - 1)
            }));
        }
        let mut i = 0;
        self.params.retain(|_| {
            i += 1;
            map[i - 1].is_some()
        });
        map
    }

    /// Registers every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Gradients for every parameter in order; unused parameters get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

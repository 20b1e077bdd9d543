//! Named parameter registry with group tags and per-group freezing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter groups addressed by the staged training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Position embedding table.
    Position,
    /// Word embedding table.
    Word,
    /// Encoder body: attention, feed-forward and layer-norm weights.
    Body,
    /// Predicate and argument heads.
    Classifier,
    /// Low-rank adapter matrices.
    Lora,
    /// Expert gate projections.
    Gate,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Position,
        Group::Word,
        Group::Body,
        Group::Classifier,
        Group::Lora,
        Group::Gate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Position => "theta_p",
            Group::Word => "theta_w",
            Group::Body => "theta_b",
            Group::Classifier => "theta_c",
            Group::Lora => "theta_lora",
            Group::Gate => "theta_gate",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: Group,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            group,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters in name order, the order used for serialization.
    pub fn iter_sorted(&self) -> impl Iterator<Item = &Parameter> {
        self.by_name.values().map(|id| &self.params[id.0])
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks exactly the listed groups as trainable.
    pub fn set_trainable_groups(&mut self, groups: &[Group]) {
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        let mut groups: Vec<Group> = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.group)
            .collect();
        groups.sort();
        groups.dedup();
        groups
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients of trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                let p = &mut self.params[i];
                if p.trainable {
                    p.grad.add_scaled_assign(g, scale);
                }
            }
        }
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Gradients produced by one backward pass, indexed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn bits_eq(&self, other: &Gradients) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.bits_eq(b),
                (None, None) => true,
                _ => false,
            })
    }
}

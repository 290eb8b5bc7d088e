use std::collections::{BTreeSet, HashMap};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Attn,
    Ffn,
    QkvQ,
    QkvK,
    QkvV,
    Proj,
    Embed,
    Head,
    Norm,
}

/// How a group is drawn at build / reinitialization time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Init::TruncNormal(std) => {
                let n = Normal::new(0.0, std).expect("finite std");
                loop {
                    let v: f64 = n.sample(rng);
                    if v.abs() <= 2.0 * std {
                        return v;
                    }
                }
            }
            Init::Normal(std) => Normal::new(0.0, std).expect("finite std").sample(rng),
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
        }
    }

    pub fn fill(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    pub tags: BTreeSet<Tag>,
    pub block: Option<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamGroup {
    pub fn has(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }

    /// Weight matrices (as opposed to bias / gain vectors).
    pub fn is_matrix(&self) -> bool {
        self.tensor.shape().len() == 2
    }
}

/// Ordered collection of parameter groups with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        tags: &[Tag],
        block: Option<usize>,
    ) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate group {name}");
        self.index.insert(name.clone(), self.groups.len());
        self.groups.push(ParamGroup {
            name,
            tensor: Tensor::zeros(shape),
            tags: tags.iter().copied().collect(),
            block,
            trainable: true,
            init,
        });
    }

    /// Redraws every group, in order, from one seeded stream.
    pub fn initialize(&mut self, rng: &mut ChaCha8Rng) {
        for g in &mut self.groups {
            g.tensor = g.init.fill(g.tensor.shape(), rng);
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamGroup> {
        self.groups.iter()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&ParamGroup> {
        self.position(name)
            .map(|i| &self.groups[i])
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        match self.position(name) {
            Some(i) => Ok(&mut self.groups[i]),
            None => Err(Error::Lookup(name.to_string())),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.groups.iter().map(|g| g.tensor.numel()).sum()
    }
}

/// Gradients aligned with a [`ParamSet`]. `reached` is false for groups that
/// were frozen or not on the loss path (e.g. other tasks' heads); their
/// gradient is zero.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
    pub reached: Vec<bool>,
}

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

//! Desk-scale networks: a mini vision transformer (patch embedding, CLS
//! token, pre-norm MHSA + FFN blocks, per-task heads) and a capacity-matched
//! MLP baseline.
//!
//! Parameters live in a [`ParamSet`] of named groups. Each forward pass binds
//! the groups onto a fresh [`Tape`]; only the active task's head is bound, so
//! other heads receive no gradient at all.

mod mlp;
mod params;
mod vit;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use mlp::{Mlp, MlpConfig};
pub use params::{Init, ParamGrads, ParamGroup, ParamSet, Tag, INIT_STD};
pub use vit::{MiniVit, MiniVitConfig, BLOCK_COMPONENTS};

const CHECKPOINT_FORMAT: &str = "plab-model-v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Vit(MiniVitConfig),
    Mlp(MlpConfig),
    /// MLP whose width is matched to the one-block variant of this ViT.
    MlpMatched(MiniVitConfig),
}

impl ModelConfig {
    pub fn tasks(&self) -> usize {
        match self {
            ModelConfig::Vit(c) | ModelConfig::MlpMatched(c) => c.tasks,
            ModelConfig::Mlp(c) => c.tasks,
        }
    }

    pub fn classes_per_task(&self) -> usize {
        match self {
            ModelConfig::Vit(c) | ModelConfig::MlpMatched(c) => c.classes_per_task,
            ModelConfig::Mlp(c) => c.classes_per_task,
        }
    }

    pub fn image_side(&self) -> usize {
        match self {
            ModelConfig::Vit(c) | ModelConfig::MlpMatched(c) => c.image_side,
            ModelConfig::Mlp(c) => c.image_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Vit(c) | ModelConfig::MlpMatched(c) => c.validate(),
            ModelConfig::Mlp(c) => c.validate(),
        }
    }
}

/// Output handles of one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub captures: Vec<Capture>,
    /// CLS token (batch, dim) after the embedding, after each block, and at
    /// the head input.
    pub cls: Vec<(String, Var)>,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct Capture {
    pub layer: String,
    pub var: Var,
}

/// Read-only snapshot of intermediate activations for a probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProbe {
    pub batch_size: usize,
    /// Layer name -> (batch * tokens, channels) capture.
    pub captures: BTreeMap<String, Tensor>,
    pub cls: Vec<(String, Tensor)>,
}

impl ActivationProbe {
    pub fn capture(&self, layer: &str) -> Result<&Tensor> {
        self.captures
            .get(layer)
            .ok_or_else(|| Error::Lookup(layer.to_string()))
    }
}

/// Loss, gradients and FFN hidden activations of one training batch.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub loss: f64,
    pub grads: ParamGrads,
    /// Post-activation fc1 output per block (ViT only).
    pub ffn_hidden: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vit(MiniVit),
    Mlp(Mlp),
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = match config {
            ModelConfig::Vit(c) => Model::Vit(MiniVit {
                config: c.clone(),
                params: MiniVit::layout(c),
            }),
            ModelConfig::Mlp(c) => Model::Mlp(Mlp {
                config: c.clone(),
                params: Mlp::layout(c),
            }),
            ModelConfig::MlpMatched(c) => {
                let mc = MlpConfig::capacity_matched(c);
                Model::Mlp(Mlp {
                    params: Mlp::layout(&mc),
                    config: mc,
                })
            }
        };
        model.reinitialize(seed);
        Ok(model)
    }

    /// Redraws every group from its init distribution. Frozen flags are kept.
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params_mut().initialize(&mut rng);
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Vit(m) => ModelConfig::Vit(m.config.clone()),
            Model::Mlp(m) => ModelConfig::Mlp(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Vit(m) => &m.params,
            Model::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Vit(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
        }
    }

    pub fn as_vit(&self) -> Option<&MiniVit> {
        match self {
            Model::Vit(m) => Some(m),
            Model::Mlp(_) => None,
        }
    }

    pub fn blocks(&self) -> usize {
        match self {
            Model::Vit(m) => m.config.blocks,
            Model::Mlp(_) => 2,
        }
    }

    pub fn tasks(&self) -> usize {
        self.config().tasks()
    }

    /// Marks the listed blocks untrainable. Freezing block 0 also freezes the
    /// embedding stem, which only feeds block 0.
    pub fn freeze_blocks(&mut self, blocks: &[usize]) -> Result<()> {
        let n = self.blocks();
        if let Some(b) = blocks.iter().find(|&&b| b >= n) {
            return Err(Error::Config(format!("cannot freeze block {b}: model has {n} blocks")));
        }
        let stem = blocks.contains(&0);
        for g in self.params_mut().groups_mut() {
            let frozen = match g.block {
                Some(b) => blocks.contains(&b),
                None => stem && g.has(Tag::Embed),
            };
            if frozen {
                g.trainable = false;
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, task: usize) -> Vec<Option<Var>> {
        let active = format!("head.task{task}");
        self.params()
            .iter()
            .map(|g| {
                let other_head = g.name.starts_with("head.task")
                    && g.name != active
                    && g.name != format!("{active}.bias");
                if other_head {
                    None
                } else {
                    Some(tape.leaf(g.tensor.clone(), g.trainable))
                }
            })
            .collect()
    }

    /// Records a forward pass for `task` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        task: usize,
    ) -> Result<(ForwardPass, Vec<Option<Var>>)> {
        let bound = self.bind(tape, task);
        let pass = match self {
            Model::Vit(m) => m.forward(tape, &bound, images, task)?,
            Model::Mlp(m) => m.forward(tape, &bound, images, task)?,
        };
        Ok((pass, bound))
    }

    pub fn logits(&self, images: &Tensor, task: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (pass, _) = self.forward(&mut tape, images, task)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Index of the largest logit per sample, within the task's label set.
    pub fn predict(&self, images: &Tensor, task: usize) -> Result<Vec<usize>> {
        let logits = self.logits(images, task)?;
        let (_, c) = logits.rows_cols();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Mean cross-entropy without a backward pass.
    pub fn loss(&self, images: &Tensor, labels: &[usize], task: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let (pass, _) = self.forward(&mut tape, images, task)?;
        let loss = tape.cross_entropy(pass.logits, labels)?;
        Ok(tape.value(loss).item())
    }

    pub fn loss_and_grads(&self, images: &Tensor, labels: &[usize], task: usize) -> Result<TrainStep> {
        let mut tape = Tape::new();
        let (pass, bound) = self.forward(&mut tape, images, task)?;
        let loss_var = tape.cross_entropy(pass.logits, labels)?;
        let loss = tape.value(loss_var).item();
        let mut g = tape.backward(loss_var)?;
        let mut grads = Vec::with_capacity(bound.len());
        let mut reached = Vec::with_capacity(bound.len());
        for (b, group) in bound.iter().zip(self.params().iter()) {
            match b {
                Some(v) if tape.requires_grad(*v) => {
                    reached.push(g.reached(*v));
                    grads.push(g.take(*v));
                }
                _ => {
                    reached.push(false);
                    grads.push(Tensor::zeros(group.tensor.shape()));
                }
            }
        }
        let ffn_hidden = pass
            .captures
            .iter()
            .filter(|c| c.layer.ends_with(".fc1"))
            .map(|c| tape.value(c.var).clone())
            .collect();
        Ok(TrainStep {
            loss,
            grads: ParamGrads { grads, reached },
            ffn_hidden,
        })
    }

    pub fn probe_activations(&self, images: &Tensor) -> Result<ActivationProbe> {
        let mut tape = Tape::new();
        let (pass, _) = self.forward(&mut tape, images, 0)?;
        if pass.batch == 0 {
            return Err(Error::InvalidInput("empty probe batch".into()));
        }
        Ok(ActivationProbe {
            batch_size: pass.batch,
            captures: pass
                .captures
                .iter()
                .map(|c| (c.layer.clone(), tape.value(c.var).clone()))
                .collect(),
            cls: pass
                .cls
                .iter()
                .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
                .collect(),
        })
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config(),
            groups: self
                .params()
                .iter()
                .map(|g| {
                    (
                        g.name.clone(),
                        GroupRecord {
                            shape: g.tensor.shape().to_vec(),
                            data: g.tensor.data().to_vec(),
                            trainable: g.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format {}", ckpt.format)));
        }
        let mut model = Model::build(&ckpt.config, 0)?;
        if model.params().len() != ckpt.groups.len() {
            return Err(Error::InvalidInput("checkpoint group count does not match config".into()));
        }
        for g in model.params_mut().groups_mut() {
            let rec = ckpt
                .groups
                .get(&g.name)
                .ok_or_else(|| Error::Lookup(g.name.clone()))?;
            if rec.shape != g.tensor.shape() {
                return Err(Error::shape("checkpoint", &rec.shape, g.tensor.shape()));
            }
            g.tensor = Tensor::new(rec.shape.clone(), rec.data.clone())?;
            g.trainable = rec.trainable;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: ModelCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format: String,
    pub config: ModelConfig,
    pub groups: BTreeMap<String, GroupRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Column slice of a (dim, dim) projection belonging to one attention head.
pub fn head_slice(weight: &Tensor, head: usize, heads: usize) -> Result<crate::linalg::Matrix> {
    let shape = weight.shape();
    if shape.len() != 2 || shape[1] % heads != 0 || head >= heads {
        return Err(Error::shape("head_slice", shape, &[head, heads]));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let w = cols / heads;
    let mut data = Vec::with_capacity(rows * w);
    for r in 0..rows {
        data.extend_from_slice(&weight.data()[r * cols + head * w..r * cols + (head + 1) * w]);
    }
    crate::linalg::Matrix::new(rows, w, data)
}

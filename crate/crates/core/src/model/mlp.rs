use serde::{Deserialize, Serialize};

use super::params::{Init, ParamSet, Tag, INIT_STD};
use super::vit::{MiniVit, MiniVitConfig};
use super::{Capture, ForwardPass};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Two-hidden-layer GELU MLP over flattened images, with per-task heads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub image_side: usize,
    pub hidden: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.hidden == 0 || self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("mlp dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (i, h, c) = (self.image_side * self.image_side, self.hidden, self.classes_per_task);
        i * h + h + h * h + h + self.tasks * (h * c + c)
    }

    /// Width whose parameter count is closest to the one-block variant of
    /// `vit`, counting heads on both sides.
    pub fn capacity_matched(vit: &MiniVitConfig) -> Self {
        let one_block = MiniVitConfig {
            blocks: 1,
            ..vit.clone()
        };
        let target = MiniVit::layout(&one_block).total_count() as i64;
        let candidate = |hidden| Self {
            image_side: vit.image_side,
            hidden,
            tasks: vit.tasks,
            classes_per_task: vit.classes_per_task,
        };
        (1..=4096)
            .map(candidate)
            .min_by_key(|c| (c.param_count() as i64 - target).abs())
            .expect("non-empty search range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: ParamSet,
}

impl Mlp {
    pub(crate) fn layout(config: &MlpConfig) -> ParamSet {
        let (i, h, c) = (config.image_side * config.image_side, config.hidden, config.classes_per_task);
        let proj = Init::TruncNormal(INIT_STD);
        let mut p = ParamSet::new();
        p.add("layer0.fc", &[i, h], proj, &[Tag::Ffn], Some(0));
        p.add("layer0.fc.bias", &[h], Init::Zeros, &[Tag::Ffn], Some(0));
        p.add("layer1.fc", &[h, h], proj, &[Tag::Ffn], Some(1));
        p.add("layer1.fc.bias", &[h], Init::Zeros, &[Tag::Ffn], Some(1));
        for t in 0..config.tasks {
            p.add(format!("head.task{t}"), &[h, c], proj, &[Tag::Head], None);
            p.add(format!("head.task{t}.bias"), &[c], Init::Zeros, &[Tag::Head], None);
        }
        p
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Option<Var>],
        images: &Tensor,
        task: usize,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        if task >= c.tasks {
            return Err(Error::InvalidInput(format!("task {task} has no head (tasks = {})", c.tasks)));
        }
        let p = |name: &str| -> Result<Var> {
            let i = self
                .params
                .position(name)
                .ok_or_else(|| Error::Lookup(name.to_string()))?;
            bound[i].ok_or_else(|| Error::Lookup(format!("{name} not bound")))
        };
        let pixels = c.image_side * c.image_side;
        let batch = images.numel() / pixels;
        let flat = images.clone().reshaped(&[batch, pixels])?;
        let mut h = tape.constant(flat);
        let mut captures = Vec::new();
        for l in 0..2 {
            let z = tape.matmul(h, p(&format!("layer{l}.fc"))?)?;
            let z = tape.add_row(z, p(&format!("layer{l}.fc.bias"))?)?;
            h = tape.gelu(z);
            captures.push(Capture {
                layer: format!("layer{l}.fc"),
                var: h,
            });
        }
        let logits = tape.matmul(h, p(&format!("head.task{task}"))?)?;
        let logits = tape.add_row(logits, p(&format!("head.task{task}.bias"))?)?;
        Ok(ForwardPass {
            logits,
            captures,
            cls: Vec::new(),
            batch,
        })
    }
}

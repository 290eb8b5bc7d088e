use serde::{Deserialize, Serialize};

use super::params::{Init, ParamSet, Tag, INIT_STD};
use super::{Capture, ForwardPass};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Sub-layer outputs captured per block, in forward order.
pub const BLOCK_COMPONENTS: [&str; 7] = ["norm1", "attn", "resid1", "norm2", "fc1", "fc2", "resid2"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiniVitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
}

impl Default for MiniVitConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            embed_dim: 32,
            heads: 4,
            blocks: 2,
            ffn_hidden: 64,
            tasks: 20,
            classes_per_task: 2,
        }
    }
}

impl MiniVitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ffn_hidden < self.embed_dim {
            return Err(Error::Config(format!(
                "ffn_hidden {} must be at least embed_dim {}",
                self.ffn_hidden, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    /// Patch tokens plus the CLS token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniVit {
    pub config: MiniVitConfig,
    pub params: ParamSet,
}

impl MiniVit {
    pub(crate) fn layout(config: &MiniVitConfig) -> ParamSet {
        let (d, h) = (config.embed_dim, config.ffn_hidden);
        let pd = config.patch_side * config.patch_side;
        let mut p = ParamSet::new();
        let proj = Init::TruncNormal(INIT_STD);
        p.add("embed.patch", &[pd, d], proj, &[Tag::Embed], None);
        p.add("embed.patch.bias", &[d], Init::Zeros, &[Tag::Embed], None);
        p.add("embed.cls", &[1, d], Init::Zeros, &[Tag::Embed], None);
        p.add("embed.pos", &[config.tokens(), d], Init::Normal(INIT_STD), &[Tag::Embed], None);
        for b in 0..config.blocks {
            let blk = Some(b);
            p.add(format!("block{b}.norm1.scale"), &[d], Init::Ones, &[Tag::Norm], blk);
            p.add(format!("block{b}.norm1.shift"), &[d], Init::Zeros, &[Tag::Norm], blk);
            p.add(format!("block{b}.attn.q"), &[d, d], proj, &[Tag::Attn, Tag::QkvQ], blk);
            p.add(format!("block{b}.attn.k"), &[d, d], proj, &[Tag::Attn, Tag::QkvK], blk);
            p.add(format!("block{b}.attn.v"), &[d, d], proj, &[Tag::Attn, Tag::QkvV], blk);
            p.add(format!("block{b}.attn.proj"), &[d, d], proj, &[Tag::Attn, Tag::Proj], blk);
            p.add(format!("block{b}.norm2.scale"), &[d], Init::Ones, &[Tag::Norm], blk);
            p.add(format!("block{b}.norm2.shift"), &[d], Init::Zeros, &[Tag::Norm], blk);
            p.add(format!("block{b}.ffn.fc1"), &[d, h], proj, &[Tag::Ffn], blk);
            p.add(format!("block{b}.ffn.fc1.bias"), &[h], Init::Zeros, &[Tag::Ffn], blk);
            p.add(format!("block{b}.ffn.fc2"), &[h, d], proj, &[Tag::Ffn], blk);
            p.add(format!("block{b}.ffn.fc2.bias"), &[d], Init::Zeros, &[Tag::Ffn], blk);
        }
        p.add("head.norm.scale", &[d], Init::Ones, &[Tag::Head, Tag::Norm], None);
        p.add("head.norm.shift", &[d], Init::Zeros, &[Tag::Head, Tag::Norm], None);
        for t in 0..config.tasks {
            let c = config.classes_per_task;
            p.add(format!("head.task{t}"), &[d, c], proj, &[Tag::Head], None);
            p.add(format!("head.task{t}.bias"), &[c], Init::Zeros, &[Tag::Head], None);
        }
        p
    }

    /// Splits (batch, side, side) images into (batch * patches, patch_side^2)
    /// rows, patches in raster order.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let side = c.image_side;
        let shape = images.shape();
        let batch = match shape {
            [b, h, w] if *h == side && *w == side => *b,
            [b, n] if *n == side * side => *b,
            _ => return Err(Error::shape("patchify", shape, &[0, side, side])),
        };
        let (ps, grid) = (c.patch_side, side / c.patch_side);
        let data = images.data();
        let mut out = Vec::with_capacity(data.len());
        for b in 0..batch {
            let img = &data[b * side * side..(b + 1) * side * side];
            for gy in 0..grid {
                for gx in 0..grid {
                    for y in 0..ps {
                        let row = (gy * ps + y) * side + gx * ps;
                        out.extend_from_slice(&img[row..row + ps]);
                    }
                }
            }
        }
        Tensor::new(vec![batch * grid * grid, ps * ps], out)
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
        let (d, t, heads, dh) = (c.embed_dim, c.tokens(), c.heads, c.head_dim());
        let patches = self.patchify(images)?;
        let batch = patches.shape()[0] / c.patches();
        let mut captures = Vec::new();
        let mut cls = Vec::new();

        let x = tape.constant(patches);
        let e = tape.matmul(x, p("embed.patch")?)?;
        let e = tape.add_row(e, p("embed.patch.bias")?)?;
        let e = tape.reshape(e, &[batch, c.patches(), d])?;
        let ones = tape.constant(Tensor::filled(&[batch, 1], 1.0));
        let cls_rows = tape.matmul(ones, p("embed.cls")?)?;
        let cls_rows = tape.reshape(cls_rows, &[batch, 1, d])?;
        let tokens = tape.concat(&[cls_rows, e], 1)?;
        let tokens = tape.reshape(tokens, &[batch, t * d])?;
        let pos = tape.reshape(p("embed.pos")?, &[t * d])?;
        let tokens = tape.add_row(tokens, pos)?;
        let mut h = tape.reshape(tokens, &[batch * t, d])?;
        cls.push(("embed".to_string(), cls_token(tape, h, batch, t, d)?));

        let scale = 1.0 / (dh as f64).sqrt();
        for b in 0..c.blocks {
            let n1 = tape.layernorm(h);
            let n1 = tape.mul_row(n1, p(&format!("block{b}.norm1.scale"))?)?;
            let n1 = tape.add_row(n1, p(&format!("block{b}.norm1.shift"))?)?;
            let split = |tape: &mut Tape, w: Var, axes: &[usize], last: [usize; 2]| -> Result<Var> {
                let y = tape.matmul(n1, w)?;
                let y = tape.reshape(y, &[batch, t, heads, dh])?;
                let y = tape.permute(y, axes)?;
                tape.reshape(y, &[batch * heads, last[0], last[1]])
            };
            let q = split(tape, p(&format!("block{b}.attn.q"))?, &[0, 2, 1, 3], [t, dh])?;
            let kt = split(tape, p(&format!("block{b}.attn.k"))?, &[0, 2, 3, 1], [dh, t])?;
            let v = split(tape, p(&format!("block{b}.attn.v"))?, &[0, 2, 1, 3], [t, dh])?;
            let scores = tape.bmm(q, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores);
            let mixed = tape.bmm(weights, v)?;
            let mixed = tape.reshape(mixed, &[batch, heads, t, dh])?;
            let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
            let mixed = tape.reshape(mixed, &[batch * t, d])?;
            let attn = tape.matmul(mixed, p(&format!("block{b}.attn.proj"))?)?;
            let r1 = tape.add(h, attn)?;

            let n2 = tape.layernorm(r1);
            let n2 = tape.mul_row(n2, p(&format!("block{b}.norm2.scale"))?)?;
            let n2 = tape.add_row(n2, p(&format!("block{b}.norm2.shift"))?)?;
            let f1 = tape.matmul(n2, p(&format!("block{b}.ffn.fc1"))?)?;
            let f1 = tape.add_row(f1, p(&format!("block{b}.ffn.fc1.bias"))?)?;
            let f1 = tape.gelu(f1);
            let f2 = tape.matmul(f1, p(&format!("block{b}.ffn.fc2"))?)?;
            let f2 = tape.add_row(f2, p(&format!("block{b}.ffn.fc2.bias"))?)?;
            let r2 = tape.add(r1, f2)?;

            for (name, var) in BLOCK_COMPONENTS.iter().zip([n1, attn, r1, n2, f1, f2, r2]) {
                captures.push(Capture {
                    layer: format!("block{b}.{name}"),
                    var,
                });
            }
            h = r2;
            cls.push((format!("block{b}"), cls_token(tape, h, batch, t, d)?));
        }

        let hn = tape.layernorm(h);
        let hn = tape.mul_row(hn, p("head.norm.scale")?)?;
        let hn = tape.add_row(hn, p("head.norm.shift")?)?;
        let head_in = cls_token(tape, hn, batch, t, d)?;
        cls.push(("head".to_string(), head_in));
        let logits = tape.matmul(head_in, p(&format!("head.task{task}"))?)?;
        let logits = tape.add_row(logits, p(&format!("head.task{task}.bias"))?)?;
        Ok(ForwardPass {
            logits,
            captures,
            cls,
            batch,
        })
    }
}

/// Row 0 of every sample's token block, as (batch, dim).
fn cls_token(tape: &mut Tape, h: Var, batch: usize, tokens: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(h, &[batch, tokens, d])?;
    let x = tape.slice(x, 1, 0, 1)?;
    tape.reshape(x, &[batch, d])
}

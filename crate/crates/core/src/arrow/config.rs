use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Sgd,
    RmsLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaDecay {
    #[default]
    None,
    /// alpha_0 * rate^t, t = optimizer steps taken.
    ExpGlobal { rate: f64 },
    /// alpha_0 * rate^k, k = task boundaries crossed.
    ExpPerTask { rate: f64 },
}

fn default_rho() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_scope() -> String {
    "last_block_attn".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrowConfig {
    pub alpha: f64,
    pub beta: f64,
    pub window: usize,
    pub eta: f64,
    pub warmup: Warmup,
    #[serde(default)]
    pub alpha_decay: AlphaDecay,
    #[serde(default = "default_scope")]
    pub scope: String,
    /// Push g_t before applying, so it enters its own preconditioner.
    #[serde(default)]
    pub include_current: bool,
    /// Empty every window when a new task begins.
    #[serde(default)]
    pub reset_window_on_task: bool,
    #[serde(default = "default_rho")]
    pub rms_rho: f64,
    #[serde(default = "default_eps")]
    pub rms_eps: f64,
}

impl Default for ArrowConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 0.9,
            window: 20,
            eta: 1e-3,
            warmup: Warmup::RmsLike,
            alpha_decay: AlphaDecay::None,
            scope: default_scope(),
            include_current: false,
            reset_window_on_task: false,
            rms_rho: default_rho(),
            rms_eps: default_eps(),
        }
    }
}

impl ArrowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value > 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite value >= 0");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be a finite value > 0");
        }
        if let AlphaDecay::ExpGlobal { rate } | AlphaDecay::ExpPerTask { rate } = self.alpha_decay {
            if !(rate > 0.0 && rate <= 1.0) {
                return bad("decay rate must lie in (0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.rms_rho) || !(self.rms_eps > 0.0) {
            return bad("rms_rho must lie in [0, 1) and rms_eps must be > 0");
        }
        Selector::parse(&self.scope)?;
        Ok(())
    }

    /// alpha after `steps` optimizer steps and `tasks` task boundaries.
    pub fn alpha_at(&self, steps: u64, tasks: u64) -> f64 {
        match self.alpha_decay {
            AlphaDecay::None => self.alpha,
            AlphaDecay::ExpGlobal { rate } => self.alpha * rate.powf(steps as f64),
            AlphaDecay::ExpPerTask { rate } => self.alpha * rate.powf(tasks as f64),
        }
    }
}

/// Parsed scope selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    All,
    Attn,
    Ffn,
    /// Attention groups in the last N blocks.
    LastAttn(usize),
    /// Every group in the last N blocks.
    LastBlocks(usize),
    Block(usize),
}

impl Selector {
    pub fn parse(s: &str) -> Result<Self> {
        let err = || Error::Config(format!("unknown scope selector {s:?}"));
        let count = |n: &str| -> Result<usize> {
            match n.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(err()),
            }
        };
        Ok(match s {
            "all" => Selector::All,
            "attn" => Selector::Attn,
            "ffn" => Selector::Ffn,
            "last_block_attn" => Selector::LastAttn(1),
            _ => {
                if let Some(n) = s.strip_prefix("last").and_then(|r| r.strip_suffix("_attn")) {
                    Selector::LastAttn(count(n)?)
                } else if let Some(n) = s.strip_prefix("last").and_then(|r| r.strip_suffix("_blocks")) {
                    Selector::LastBlocks(count(n)?)
                } else if let Some(i) = s.strip_prefix("block") {
                    Selector::Block(i.parse().map_err(|_| err())?)
                } else {
                    return Err(err());
                }
            }
        })
    }

    fn matches(self, g: &ParamGroup, blocks: usize) -> bool {
        let in_last = |n: usize| g.block.is_some_and(|b| b + n >= blocks);
        match self {
            Selector::All => true,
            Selector::Attn => g.has(Tag::Attn),
            Selector::Ffn => g.has(Tag::Ffn),
            Selector::LastAttn(n) => g.has(Tag::Attn) && in_last(n),
            Selector::LastBlocks(n) => in_last(n),
            Selector::Block(i) => g.block == Some(i),
        }
    }
}

/// Per-group flag: true for ARROW-managed, false for base-managed. Frozen
/// groups are never managed. A selector that matches no trainable group is a
/// configuration error.
pub fn scope_filter(groups: &[ParamGroup], scope: &str) -> Result<Vec<bool>> {
    let sel = Selector::parse(scope)?;
    let blocks = groups.iter().filter_map(|g| g.block).max().map_or(0, |b| b + 1);
    let managed: Vec<bool> = groups.iter().map(|g| g.trainable && sel.matches(g, blocks)).collect();
    if !managed.iter().any(|&m| m) {
        return Err(Error::Config(format!("scope {scope:?} matches no trainable group")));
    }
    Ok(managed)
}

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{scope_filter, ArrowConfig, Warmup};
use super::window::{woodbury_apply, GradientWindow, WindowRecord};
use crate::error::{Error, Result};
use crate::model::{ParamGrads, ParamSet};

/// EMA of squared gradients for the RMS-like warm-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsState {
    pub v: Vec<f64>,
    pub rho: f64,
    pub eps: f64,
}

impl RmsState {
    pub fn new(dim: usize, rho: f64, eps: f64) -> Self {
        Self {
            v: vec![0.0; dim],
            rho,
            eps,
        }
    }

    fn update(&mut self, g: &[f64]) {
        for (v, x) in self.v.iter_mut().zip(g) {
            *v = self.rho * *v + (1.0 - self.rho) * x * x;
        }
    }
}

/// Optimizer state for one ARROW-managed group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub window: GradientWindow,
    pub rms: RmsState,
}

impl GroupState {
    pub fn new(name: &str, dim: usize, config: &ArrowConfig) -> Self {
        Self {
            window: GradientWindow::new(name, dim, config.window),
            rms: RmsState::new(dim, config.rms_rho, config.rms_eps),
        }
    }
}

/// Plain SGD delta, -lr g.
pub fn sgd_delta(lr: f64, g: &[f64]) -> Vec<f64> {
    g.iter().map(|x| -lr * x).collect()
}

/// Warm-up delta. The RMS state has already absorbed g_t.
pub fn warmup_step(g: &[f64], rms: &RmsState, config: &ArrowConfig) -> Vec<f64> {
    match config.warmup {
        Warmup::Sgd => sgd_delta(config.eta, g),
        Warmup::RmsLike => g
            .iter()
            .zip(&rms.v)
            .map(|(x, v)| -config.eta * x / (v.sqrt() + rms.eps))
            .collect(),
    }
}

/// One ARROW step for one group with the damping `alpha` already decayed.
/// Returns the parameter delta. A non-finite gradient is rejected before
/// any state changes.
pub fn step(state: &mut GroupState, g: &[f64], config: &ArrowConfig, alpha: f64) -> Result<Vec<f64>> {
    if g.len() != state.window.dim() {
        return Err(Error::shape("arrow step", &[state.window.dim()], &[g.len()]));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {}", state.window.group())));
    }
    if config.include_current {
        state.window.push(g)?;
    }
    // The accumulator tracks every step so a later warm-up (after a window
    // reset) starts from current statistics.
    if config.warmup == Warmup::RmsLike {
        state.rms.update(g);
    }
    let delta = if !state.window.is_full() {
        warmup_step(g, &state.rms, config)
    } else if config.beta == 0.0 {
        sgd_delta(config.eta / alpha, g)
    } else {
        let mut w = woodbury_apply(&state.window, alpha, config.beta, g)?;
        w.iter_mut().for_each(|x| *x *= -config.eta);
        w
    };
    if !config.include_current {
        state.window.push(g)?;
    }
    Ok(delta)
}

/// ARROW over a parameter set. Groups outside the scope take SGD steps with
/// the same eta; frozen groups and groups the loss did not reach are left
/// alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrow {
    config: ArrowConfig,
    managed: Vec<bool>,
    states: Vec<Option<GroupState>>,
    steps: u64,
    tasks: u64,
}

impl Arrow {
    pub fn new(config: ArrowConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let managed = scope_filter(params.groups(), &config.scope)?;
        let states = params
            .iter()
            .zip(&managed)
            .map(|(g, &m)| m.then(|| GroupState::new(&g.name, g.tensor.numel(), &config)))
            .collect();
        Ok(Self {
            config,
            managed,
            states,
            steps: 0,
            tasks: 0,
        })
    }

    pub fn config(&self) -> &ArrowConfig {
        &self.config
    }

    pub fn managed(&self) -> &[bool] {
        &self.managed
    }

    pub fn state(&self, group: usize) -> Option<&GroupState> {
        self.states.get(group).and_then(Option::as_ref)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha_at(self.steps, self.tasks)
    }

    /// Called at the onset of every task after the first.
    pub fn begin_task(&mut self) {
        self.tasks += 1;
        if self.config.reset_window_on_task {
            for s in self.states.iter_mut().flatten() {
                s.window.clear();
            }
        }
    }

    /// Drops every window and RMS accumulator.
    pub fn reset(&mut self, params: &ParamSet) -> Result<()> {
        *self = Self::new(self.config.clone(), params)?;
        Ok(())
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.grads.len() != params.len() {
            return Err(Error::shape("arrow apply", &[params.len()], &[grads.grads.len()]));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let alpha = self.alpha();
        for (i, group) in params.groups_mut().iter_mut().enumerate() {
            if !group.trainable || !grads.reached[i] {
                continue;
            }
            let g = grads.grads[i].data();
            let delta = match &mut self.states[i] {
                Some(state) => step(state, g, &self.config, alpha)?,
                None => sgd_delta(self.config.eta, g),
            };
            for (p, d) in group.tensor.data_mut().iter_mut().zip(&delta) {
                *p += d;
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> ArrowCheckpoint {
        let alpha = self.alpha();
        let groups = self
            .states
            .iter()
            .flatten()
            .map(|s| {
                (
                    s.window.group().to_string(),
                    GroupRecord {
                        window: s.window.to_record(),
                        rms_v: s.rms.v.clone(),
                        alpha_t: alpha,
                    },
                )
            })
            .collect();
        ArrowCheckpoint {
            format: FORMAT.into(),
            config: self.config.clone(),
            steps: self.steps,
            tasks: self.tasks,
            groups,
        }
    }

    pub fn from_checkpoint(ckpt: &ArrowCheckpoint, params: &ParamSet) -> Result<Self> {
        if ckpt.format != FORMAT {
            return Err(Error::InvalidInput(format!("unknown optimizer checkpoint format {:?}", ckpt.format)));
        }
        let mut opt = Self::new(ckpt.config.clone(), params)?;
        opt.steps = ckpt.steps;
        opt.tasks = ckpt.tasks;
        let mut seen = 0;
        for (i, g) in params.iter().enumerate() {
            let Some(state) = opt.states[i].as_mut() else { continue };
            let rec = ckpt
                .groups
                .get(&g.name)
                .ok_or_else(|| Error::Lookup(format!("optimizer state for {}", g.name)))?;
            if rec.rms_v.len() != state.rms.v.len() || rec.window.dim != state.window.dim() {
                return Err(Error::InvalidInput(format!("optimizer state shape mismatch for {}", g.name)));
            }
            state.window = GradientWindow::from_record(&rec.window)?;
            state.rms.v = rec.rms_v.clone();
            seen += 1;
        }
        if seen != ckpt.groups.len() {
            return Err(Error::InvalidInput("optimizer checkpoint has groups outside the scope".into()));
        }
        Ok(opt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path, params: &ParamSet) -> Result<Self> {
        let ckpt: ArrowCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt, params)
    }
}

const FORMAT: &str = "plab-arrow-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrowCheckpoint {
    pub format: String,
    pub config: ArrowConfig,
    pub steps: u64,
    pub tasks: u64,
    pub groups: BTreeMap<String, GroupRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub window: WindowRecord,
    pub rms_v: Vec<f64>,
    pub alpha_t: f64,
}

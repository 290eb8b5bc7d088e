use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stream::StreamConfig;
use crate::arrow::{ArrowConfig, Warmup};
use crate::cbp::CbpConfig;
use crate::error::{Error, Result};
use crate::metrics::MIN_PROBE_BATCH;
use crate::model::{MiniVitConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { eta: f64 },
    Arrow(ArrowConfig),
    /// SGD plus unit replacement after every step.
    Cbp { eta: f64, cbp: CbpConfig },
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd { eta } | OptimizerConfig::Cbp { eta, .. } if !(*eta > 0.0 && eta.is_finite()) => {
                Err(Error::Config("eta must be a finite value > 0".into()))
            }
            OptimizerConfig::Sgd { .. } => Ok(()),
            OptimizerConfig::Cbp { cbp, .. } => cbp.validate(),
            OptimizerConfig::Arrow(a) => a.validate(),
        }
    }

    /// Short method label, e.g. `sgd` or `a1e-3w20b0.9rms`.
    pub fn label(&self) -> String {
        match self {
            OptimizerConfig::Sgd { .. } => "sgd".into(),
            OptimizerConfig::Cbp { .. } => "cbp".into(),
            OptimizerConfig::Arrow(a) => arrow_label(a),
        }
    }
}

pub fn arrow_label(a: &ArrowConfig) -> String {
    let warm = match a.warmup {
        Warmup::RmsLike => "rms",
        Warmup::Sgd => "",
    };
    format!("a{:e}w{}b{}{warm}", a.alpha, a.window, a.beta)
}

/// Cartesian grid over the ARROW hyperparameters. Empty lists keep the base
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub window: Vec<usize>,
    #[serde(default)]
    pub warmup: Vec<Warmup>,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_cadence() -> usize {
    1
}
fn default_probe() -> usize {
    64
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Probe every `metric_cadence` tasks (the first and last task are
    /// always probed).
    #[serde(default = "default_cadence")]
    pub metric_cadence: usize,
    #[serde(default)]
    pub frozen_blocks: Vec<usize>,
    /// Upper-bound protocol: fresh model and optimizer at every task onset.
    #[serde(default)]
    pub reinit_each_task: bool,
    /// Eval samples of the current task used for feature probes.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stream = StreamConfig::default();
        let model = MiniVitConfig {
            tasks: stream.tasks,
            classes_per_task: stream.classes_per_task,
            image_side: stream.image_side,
            ..MiniVitConfig::default()
        };
        Self {
            name: "sgd".into(),
            model: ModelConfig::Vit(model),
            stream,
            optimizer: OptimizerConfig::Sgd { eta: 1e-3 },
            epochs_per_task: default_epochs(),
            batch_size: default_batch(),
            seeds: default_seeds(),
            metric_cadence: default_cadence(),
            frozen_blocks: Vec::new(),
            reinit_each_task: false,
            probe_size: default_probe(),
            eval_batch: default_eval_batch(),
            save_checkpoints: false,
            grid: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        self.optimizer.validate()?;
        let s = &self.stream;
        if self.model.tasks() != s.tasks
            || self.model.classes_per_task() != s.classes_per_task
            || self.model.image_side() != s.image_side
        {
            return Err(Error::Config(
                "model tasks / classes_per_task / image_side must match the stream".into(),
            ));
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 || self.metric_cadence == 0 || self.eval_batch == 0 {
            return Err(Error::Config("epochs, batch sizes and metric cadence must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let eval = s.eval_per_class * s.classes_per_task;
        if self.probe_size < MIN_PROBE_BATCH || self.probe_size > eval {
            return Err(Error::Config(format!(
                "probe_size must lie in [{MIN_PROBE_BATCH}, {eval}] (eval samples per task)"
            )));
        }
        if let Some(g) = &self.grid {
            if !matches!(self.optimizer, OptimizerConfig::Arrow(_)) {
                return Err(Error::Config("a grid needs an arrow optimizer as its base".into()));
            }
            for c in expand(self, g) {
                c.optimizer.validate()?;
            }
        }
        Ok(())
    }

    /// Truncated SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// One config per grid point, named after its hyperparameters; the
    /// config itself when there is no grid.
    pub fn grid_points(&self) -> Vec<ExperimentConfig> {
        match &self.grid {
            Some(g) => expand(self, g),
            None => vec![self.clone()],
        }
    }
}

fn expand(base: &ExperimentConfig, g: &GridSpec) -> Vec<ExperimentConfig> {
    let OptimizerConfig::Arrow(a) = &base.optimizer else {
        return vec![base.clone()];
    };
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let windows = if g.window.is_empty() { vec![a.window] } else { g.window.clone() };
    let warmups = if g.warmup.is_empty() { vec![a.warmup] } else { g.warmup.clone() };
    let mut out = Vec::new();
    for &alpha in &or(&g.alpha, a.alpha) {
        for &window in &windows {
            for &beta in &or(&g.beta, a.beta) {
                for &warmup in &warmups {
                    let opt = ArrowConfig {
                        alpha,
                        beta,
                        window,
                        warmup,
                        ..a.clone()
                    };
                    out.push(ExperimentConfig {
                        name: arrow_label(&opt),
                        optimizer: OptimizerConfig::Arrow(opt),
                        grid: None,
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["stream"]["colour"] = serde_json::json!("red");
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn mismatched_model_and_stream() {
        let mut c = ExperimentConfig::default();
        c.stream.tasks = 10;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_expansion_names() {
        let c = ExperimentConfig {
            optimizer: OptimizerConfig::Arrow(ArrowConfig::default()),
            grid: Some(GridSpec {
                alpha: vec![1e-3, 1e-2],
                beta: vec![0.9],
                window: vec![10, 20],
                warmup: vec![Warmup::RmsLike, Warmup::Sgd],
            }),
            ..ExperimentConfig::default()
        };
        c.validate().unwrap();
        let pts = c.grid_points();
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[2].name, "a1e-3w20b0.9rms");
        assert_eq!(pts[3].name, "a1e-3w20b0.9");
        let sgd_grid = ExperimentConfig {
            grid: c.grid.clone(),
            ..ExperimentConfig::default()
        };
        assert!(sgd_grid.validate().is_err());
    }
}

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OptimizerConfig};
use super::derive_seed;
use super::stream::{gather_rows, make_stream, StreamConfig, TaskStream};
use crate::arrow::Arrow;
use crate::cbp::{cbp_step, CbpConfig, UnitLedger};
use crate::error::{Error, Result};
use crate::linalg::frobenius_norm;
use crate::metrics::{
    fau, rank_of_features, rank_of_weights, rank_per_head, series_table, ClsPoint, MetricRow,
    PlasticityReport, TaskRecord, WeightMetrics,
};
use crate::model::{Model, ParamGrads, ParamSet, Tag, TrainStep};

/// Plain SGD over the trainable groups the loss reached.
pub fn sgd_apply(params: &mut ParamSet, grads: &ParamGrads, eta: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    for (i, g) in params.groups_mut().iter_mut().enumerate() {
        if g.trainable && grads.reached[i] {
            for (p, d) in g.tensor.data_mut().iter_mut().zip(grads.grads[i].data()) {
                *p -= eta * d;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        eta: f64,
    },
    Arrow(Arrow),
    Cbp {
        eta: f64,
        config: CbpConfig,
        ledger: UnitLedger,
        rng: ChaCha8Rng,
    },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, model: &Model, seed: u64) -> Result<Self> {
        Ok(match config {
            OptimizerConfig::Sgd { eta } => Optimizer::Sgd { eta: *eta },
            OptimizerConfig::Arrow(a) => Optimizer::Arrow(Arrow::new(a.clone(), model.params())?),
            OptimizerConfig::Cbp { eta, cbp } => Optimizer::Cbp {
                eta: *eta,
                config: cbp.clone(),
                ledger: UnitLedger::new(model, cbp)?,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "cbp", 0)),
            },
        })
    }

    pub fn begin_task(&mut self) {
        if let Optimizer::Arrow(a) = self {
            a.begin_task();
        }
    }

    /// Applies one update; returns the number of CBP replacements.
    pub fn step(&mut self, model: &mut Model, step: &TrainStep) -> Result<u64> {
        match self {
            Optimizer::Sgd { eta } => sgd_apply(model.params_mut(), &step.grads, *eta).map(|_| 0),
            Optimizer::Arrow(a) => a.apply(model.params_mut(), &step.grads).map(|_| 0),
            Optimizer::Cbp {
                eta,
                config,
                ledger,
                rng,
            } => {
                sgd_apply(model.params_mut(), &step.grads, *eta)?;
                Ok(cbp_step(model, ledger, config, &step.ffn_hidden, rng)?.len() as u64)
            }
        }
    }

    /// Largest window fill over ARROW-managed groups.
    pub fn window_fill(&self) -> Option<usize> {
        match self {
            Optimizer::Arrow(a) => (0..a.managed().len())
                .filter_map(|i| a.state(i).map(|s| s.window.fill()))
                .max(),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(match self {
            Optimizer::Sgd { eta } => serde_json::to_string(&serde_json::json!({ "kind": "sgd", "eta": eta }))?,
            Optimizer::Arrow(a) => serde_json::to_string(&a.to_checkpoint())?,
            Optimizer::Cbp { ledger, .. } => serde_json::to_string(ledger)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// 1-based task in which the seed diverged.
    pub task: usize,
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Tasks completed before any divergence.
    pub report: PlasticityReport,
    pub divergence: Option<Divergence>,
}

impl SeedRecord {
    pub fn completed(&self) -> bool {
        self.divergence.is_none()
    }
}

/// One seed of one configuration, stepped task by task.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub stream: TaskStream,
    pub model: Model,
    pub optimizer: Optimizer,
    pub report: PlasticityReport,
    pub steps: u64,
    shuffle: ChaCha8Rng,
    replacements: u64,
}

enum TaskEnd {
    Done(f64),
    Diverged(Divergence),
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream_cfg = StreamConfig {
            seed: derive_seed(config.stream.seed, "stream", seed),
            ..config.stream.clone()
        };
        let stream = make_stream(&stream_cfg)?;
        let mut model = Model::build(&config.model, derive_seed(seed, "model", 0))?;
        model.freeze_blocks(&config.frozen_blocks)?;
        let optimizer = Optimizer::new(&config.optimizer, &model, seed)?;
        Ok(Self {
            config: config.clone(),
            seed,
            stream,
            model,
            optimizer,
            report: PlasticityReport::default(),
            steps: 0,
            shuffle: ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", 0)),
            replacements: 0,
        })
    }

    /// Task onset: decay / reset hooks, or a full reinit in upper-bound mode.
    pub fn begin_task(&mut self, t: usize) -> Result<()> {
        if t == 0 {
            return Ok(());
        }
        if self.config.reinit_each_task {
            self.model.reinitialize(derive_seed(self.seed, "reinit", t as u64));
            self.optimizer = Optimizer::new(&self.config.optimizer, &self.model, derive_seed(self.seed, "opt", t as u64))?;
        } else {
            self.optimizer.begin_task();
        }
        Ok(())
    }

    fn train_task(&mut self, t: usize) -> Result<TaskEnd> {
        let task = &self.stream.tasks[t];
        let n = task.train_y.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut last_epoch = 0.0;
        for _ in 0..self.config.epochs_per_task {
            order.shuffle(&mut self.shuffle);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let x = gather_rows(&task.train_x, chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| task.train_y[i]).collect();
                let step = self.model.loss_and_grads(&x, &y, t)?;
                if !step.loss.is_finite() {
                    return Ok(self.diverged(t, format!("loss {}", step.loss)));
                }
                match self.optimizer.step(&mut self.model, &step) {
                    Ok(r) => self.replacements += r,
                    Err(Error::Numeric(m)) => return Ok(self.diverged(t, m)),
                    Err(e) => return Err(e),
                }
                self.steps += 1;
                total += step.loss * chunk.len() as f64;
            }
            last_epoch = total / n as f64;
        }
        Ok(TaskEnd::Done(last_epoch))
    }

    fn diverged(&self, t: usize, reason: String) -> TaskEnd {
        TaskEnd::Diverged(Divergence {
            task: t + 1,
            step: self.steps,
            reason,
        })
    }

    /// Top-1 accuracy on task `t`'s eval split, through head `t`.
    pub fn evaluate(&self, t: usize) -> Result<f64> {
        let task = &self.stream.tasks[t];
        let n = task.eval_y.len();
        let idx: Vec<usize> = (0..n).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(self.config.eval_batch) {
            let pred = self.model.predict(&gather_rows(&task.eval_x, chunk), t)?;
            correct += chunk.iter().zip(&pred).filter(|(&i, &p)| task.eval_y[i] == p).count();
        }
        Ok(correct as f64 / n as f64)
    }

    fn probed(&self, t: usize) -> bool {
        t % self.config.metric_cadence == 0 || t + 1 == self.stream.tasks.len()
    }

    /// Fills the diagnostic fields of `rec`. Reads the model only.
    pub fn probe(&self, t: usize, rec: &mut TaskRecord) -> Result<()> {
        let task = &self.stream.tasks[t];
        let idx: Vec<usize> = (0..self.config.probe_size).collect();
        let probe = self.model.probe_activations(&gather_rows(&task.eval_x, &idx))?;
        for (layer, capture) in &probe.captures {
            rec.features.insert(layer.clone(), rank_of_features(capture)?);
            let hidden = layer.ends_with(".fc1") || layer.starts_with("layer");
            if hidden {
                rec.activity.push(fau(&probe, layer)?);
            }
        }
        for (depth, cls) in &probe.cls {
            rec.cls.push(ClsPoint {
                depth: depth.clone(),
                rank: rank_of_features(cls)?,
            });
        }
        let own_head = format!("head.task{t}");
        let heads = self.model.as_vit().map(|v| v.config.heads);
        for g in self.model.params().iter().filter(|g| g.is_matrix()) {
            if g.has(Tag::Head) && g.name != own_head {
                continue;
            }
            rec.weights.insert(
                g.name.clone(),
                WeightMetrics {
                    frobenius: frobenius_norm(&g.tensor.to_matrix())?,
                    rank: rank_of_weights(g)?,
                },
            );
            if let Some(h) = heads {
                if g.has(Tag::QkvQ) || g.has(Tag::QkvK) || g.has(Tag::QkvV) {
                    for (i, r) in rank_per_head(g, h)?.into_iter().enumerate() {
                        rec.heads.insert(format!("{}.head{i}", g.name), r);
                    }
                }
            }
        }
        Ok(())
    }

    /// Trains, evaluates and (at the cadence) probes one task.
    pub fn run_task(&mut self, t: usize) -> Result<Option<Divergence>> {
        self.begin_task(t)?;
        let before = self.replacements;
        let loss = match self.train_task(t)? {
            TaskEnd::Done(l) => l,
            TaskEnd::Diverged(d) => return Ok(Some(d)),
        };
        let mut rec = TaskRecord::new(t + 1, self.evaluate(t)?, loss, self.steps);
        rec.cbp_replacements = self.replacements - before;
        if self.probed(t) {
            rec.probed = true;
            self.probe(t, &mut rec)?;
        }
        self.report.push(rec)?;
        Ok(None)
    }

    pub fn run(mut self) -> Result<SeedRun> {
        let mut divergence = None;
        for t in 0..self.stream.tasks.len() {
            if let Some(d) = self.run_task(t)? {
                divergence = Some(d);
                break;
            }
        }
        Ok(SeedRun {
            record: SeedRecord {
                seed: self.seed,
                report: self.report,
                divergence,
            },
            model: self.model,
            optimizer: self.optimizer,
        })
    }
}

pub struct SeedRun {
    pub record: SeedRecord,
    pub model: Model,
    pub optimizer: Optimizer,
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    Trainer::new(config, seed)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub method: String,
    pub config_hash: String,
    pub stream: StreamConfig,
    pub seeds: Vec<SeedRecord>,
    /// Over seeds that completed.
    pub mean_aat: f64,
    pub std_aat: f64,
}

/// Mean and sample standard deviation; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunRecord {
    pub fn aggregate(config: &ExperimentConfig, seeds: Vec<SeedRecord>) -> Self {
        let aats: Vec<f64> = seeds.iter().filter(|s| s.completed()).map(|s| s.report.aat).collect();
        let (mean_aat, std_aat) = mean_std(&aats);
        Self {
            name: config.name.clone(),
            method: config.optimizer.label(),
            config_hash: config.hash(),
            stream: config.stream.clone(),
            seeds,
            mean_aat,
            std_aat,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn threads() -> usize {
    std::env::var("PLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs every seed of `config`, at most `PLAB_THREADS` at a time, writing
/// per-seed outputs under `out` when given. Seed order in the record
/// follows the config regardless of scheduling.
pub fn run(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.seeds.len());
    for chunk in config.seeds.chunks(threads()) {
        let results: Vec<Result<SeedRecord>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    s.spawn(move || -> Result<SeedRecord> {
                        let r = run_seed(config, seed)?;
                        if let Some(dir) = out {
                            write_seed(config, &r, &dir.join(format!("seed{seed}")))?;
                        }
                        Ok(r.record)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        });
        for r in results {
            records.push(r?);
        }
    }
    let record = RunRecord::aggregate(config, records);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    }
    Ok(record)
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const SERIES: [(&str, &str); 7] = [
    ("task", "accuracy"),
    ("features", "erank"),
    ("features", "srank"),
    ("weights", "frobenius"),
    ("heads", "erank"),
    ("cls", "erank"),
    ("activity", "fau"),
];

/// metrics.csv, report.json, plot-ready series and optional checkpoints.
pub fn write_seed(config: &ExperimentConfig, run: &SeedRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = &run.record.report;
    write_metrics_csv(&report.metric_rows(), &dir.join("metrics.csv"))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&run.record)?)?;
    for (scope, metric) in SERIES {
        let (header, rows) = series_table(report, scope, metric);
        if header.len() < 2 {
            continue;
        }
        let mut w = csv::Writer::from_path(dir.join(format!("series_{scope}_{metric}.csv")))?;
        w.write_record(&header)?;
        for row in rows {
            let mut cells = vec![(row[0] as usize).to_string()];
            cells.extend(row[1..].iter().map(|v| v.to_string()));
            w.write_record(&cells)?;
        }
        w.flush()?;
    }
    if config.save_checkpoints {
        run.model.save(&dir.join("model.json"))?;
        std::fs::write(dir.join("optimizer.json"), run.optimizer.to_json()?)?;
    }
    Ok(())
}

/// Per-task mean over completed seeds of `f(record)`, skipping tasks where
/// `f` has no value.
pub fn seed_mean_series(
    record: &RunRecord,
    f: impl Fn(&TaskRecord) -> Option<f64>,
) -> Vec<(f64, f64)> {
    let done: Vec<&SeedRecord> = record.seeds.iter().filter(|s| s.completed()).collect();
    let Some(first) = done.first() else { return Vec::new() };
    (0..first.report.tasks.len())
        .filter_map(|t| {
            let vals: Option<Vec<f64>> = done.iter().map(|s| s.report.tasks.get(t).and_then(&f)).collect();
            vals.map(|v| ((t + 1) as f64, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}

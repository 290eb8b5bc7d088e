use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Every class is its own sinusoidal texture plus Gaussian pixel noise.
    SyntheticClusters,
    /// One shared pool of textures and samples; each task relabels it with
    /// a fresh permutation under new class ids.
    LabelPermutation,
}

fn default_noise() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub generator: Generator,
    pub total_classes: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_side: usize,
    /// Pixel noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Per-sample phase offset standard deviation, in radians.
    #[serde(default)]
    pub phase_jitter: f64,
    /// Per-sample relative amplitude standard deviation.
    #[serde(default)]
    pub amplitude_jitter: f64,
    /// Sinusoid components summed per class texture.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_components() -> usize {
    1
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            generator: Generator::SyntheticClusters,
            total_classes: 40,
            tasks: 20,
            classes_per_task: 2,
            train_per_class: 200,
            eval_per_class: 100,
            image_side: 16,
            noise: default_noise(),
            phase_jitter: 0.0,
            amplitude_jitter: 0.0,
            components: default_components(),
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let need = self.tasks * self.classes_per_task;
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("a stream needs at least one task and one class per task".into()));
        }
        if self.total_classes < need {
            return Err(Error::Config(format!(
                "{} tasks x {} classes need {need} classes, only {} available",
                self.tasks, self.classes_per_task, self.total_classes
            )));
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 || self.image_side == 0 || self.components == 0 {
            return Err(Error::Config("sample counts, image side and components must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.phase_jitter >= 0.0 && self.amplitude_jitter >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Global class ids, disjoint across tasks.
    pub classes: Vec<usize>,
    /// (n, side, side)
    pub train_x: Tensor,
    /// Labels local to the task, in 0..classes_per_task.
    pub train_y: Vec<usize>,
    pub eval_x: Tensor,
    pub eval_y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub tasks: Vec<TaskData>,
}

#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng, components: usize) -> Self {
        let waves = (0..components)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..TAU)))
            .collect();
        Self { waves }
    }

    fn render(&self, c: &StreamConfig, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let side = c.image_side;
        let std = |s: f64| Normal::new(0.0, s).expect("non-negative std");
        let phase = std(c.phase_jitter).sample(rng);
        let amp = 1.0 + std(c.amplitude_jitter).sample(rng);
        let noise = std(c.noise);
        let norm = 1.0 / (self.waves.len() as f64).sqrt();
        for y in 0..side {
            for x in 0..side {
                let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
                let s: f64 = self
                    .waves
                    .iter()
                    .map(|(fx, fy, p)| (TAU * (fx * u + fy * v) + p + phase).sin())
                    .sum();
                out.push(amp * norm * s + noise.sample(rng));
            }
        }
    }
}

fn render_split(c: &StreamConfig, textures: &[&Texture], per_class: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let side = c.image_side;
    let mut data = Vec::with_capacity(textures.len() * per_class * side * side);
    let mut labels = Vec::with_capacity(textures.len() * per_class);
    for (label, tex) in textures.iter().enumerate() {
        for _ in 0..per_class {
            tex.render(c, rng, &mut data);
            labels.push(label);
        }
    }
    let n = labels.len();
    (Tensor::new(vec![n, side, side], data).expect("sized above"), labels)
}

/// Builds the full stream. Identical configs give bitwise identical streams.
pub fn make_stream(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let c = config;
    let mut class_rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "classes", 0));
    let mut ids: Vec<usize> = (0..c.total_classes).collect();
    ids.shuffle(&mut class_rng);
    let textures: Vec<Texture> = (0..c.total_classes)
        .map(|_| Texture::draw(&mut class_rng, c.components))
        .collect();

    let tasks = match c.generator {
        Generator::SyntheticClusters => (0..c.tasks)
            .map(|t| {
                let classes = ids[t * c.classes_per_task..(t + 1) * c.classes_per_task].to_vec();
                let tex: Vec<&Texture> = classes.iter().map(|&k| &textures[k]).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "task", t as u64));
                let (train_x, train_y) = render_split(c, &tex, c.train_per_class, &mut rng);
                let (eval_x, eval_y) = render_split(c, &tex, c.eval_per_class, &mut rng);
                TaskData {
                    classes,
                    train_x,
                    train_y,
                    eval_x,
                    eval_y,
                }
            })
            .collect(),
        Generator::LabelPermutation => {
            let pool: Vec<&Texture> = textures[..c.classes_per_task].iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "pool", 0));
            let (train_x, base_train) = render_split(c, &pool, c.train_per_class, &mut rng);
            let (eval_x, base_eval) = render_split(c, &pool, c.eval_per_class, &mut rng);
            (0..c.tasks)
                .map(|t| {
                    let mut perm: Vec<usize> = (0..c.classes_per_task).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "perm", t as u64)));
                    TaskData {
                        classes: ids[t * c.classes_per_task..(t + 1) * c.classes_per_task].to_vec(),
                        train_x: train_x.clone(),
                        train_y: base_train.iter().map(|&y| perm[y]).collect(),
                        eval_x: eval_x.clone(),
                        eval_y: base_eval.iter().map(|&y| perm[y]).collect(),
                    }
                })
                .collect()
        }
    };
    Ok(TaskStream {
        config: config.clone(),
        tasks,
    })
}

/// Rows `idx` of an (n, ...) tensor.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let n = x.shape()[0];
    let row = x.numel() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small(generator: Generator) -> StreamConfig {
        StreamConfig {
            generator,
            total_classes: 20,
            tasks: 10,
            classes_per_task: 2,
            train_per_class: 3,
            eval_per_class: 2,
            image_side: 8,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let s = make_stream(&small(Generator::SyntheticClusters)).unwrap();
        assert_eq!(s.tasks.len(), 10);
        let all: BTreeSet<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        assert_eq!(all, (0..20).collect());
        let t = &s.tasks[0];
        assert_eq!(t.train_x.shape(), &[6, 8, 8]);
        assert_eq!(t.train_y, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(t.eval_y.len(), 4);
    }

    #[test]
    fn same_seed_same_stream() {
        for g in [Generator::SyntheticClusters, Generator::LabelPermutation] {
            let a = make_stream(&small(g)).unwrap();
            let b = make_stream(&small(g)).unwrap();
            assert_eq!(a, b);
            let c = make_stream(&StreamConfig { seed: 1, ..small(g) }).unwrap();
            assert_ne!(a.tasks[0].train_x, c.tasks[0].train_x);
        }
    }

    #[test]
    fn class_count_arithmetic() {
        for (cpt, tasks) in [(5, 20), (10, 10), (4, 25)] {
            let c = StreamConfig {
                total_classes: 100,
                classes_per_task: cpt,
                tasks,
                ..small(Generator::SyntheticClusters)
            };
            assert!(c.validate().is_ok());
            let over = StreamConfig { tasks: tasks + 1, ..c };
            assert!(matches!(over.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn label_permutation_shares_inputs() {
        let s = make_stream(&small(Generator::LabelPermutation)).unwrap();
        assert_eq!(s.tasks[0].train_x, s.tasks[3].train_x);
        let sets: Vec<&Vec<usize>> = s.tasks.iter().map(|t| &t.classes).collect();
        assert!(sets.windows(2).all(|w| w[0] != w[1]));
    }
}

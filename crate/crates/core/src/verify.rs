//! Self-check suites behind `plab verify`: Woodbury against the dense
//! solve, eigen-rescaling, the beta = 0 degeneracy, backward against finite
//! differences, and the rank-metric fixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arrow::{
    direct_apply, eigen_rescale_check, relative_error, sgd_delta, step, woodbury_apply, ArrowConfig, GradientWindow,
    GroupState, Warmup,
};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::metrics::{erank, rank_of_matrix, srank};
use crate::model::{MiniVitConfig, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Random window with `k` gradients of dimension `d`, entries N(0, 1/d).
pub fn random_window(rng: &mut ChaCha8Rng, d: usize, k: usize) -> GradientWindow {
    let mut w = GradientWindow::new("probe", d, k);
    for _ in 0..k {
        w.push(&gaussian(rng, d, 1.0 / (d as f64).sqrt())).expect("dimension matches");
    }
    w
}

pub fn woodbury_suite(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=200);
        let k = rng.random_range(1..=30);
        let alpha = 10f64.powf(rng.random_range(-5.0..=0.0));
        let beta = rng.random_range(0.0..=1.3);
        let w = random_window(&mut rng, d, k);
        let g = gaussian(&mut rng, d, 1.0 / (d as f64).sqrt());
        let fast = woodbury_apply(&w, alpha, beta, &g)?;
        let dense = direct_apply(&w, alpha, beta, &g)?;
        worst = worst.max(relative_error(&fast, &dense));
    }
    Ok(Check::new(
        "woodbury vs dense solve",
        worst <= 1e-8,
        format!("{instances} instances, max relative error {worst:.3e}"),
    ))
}

pub fn eigen_suite(windows: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut ordered = true;
    for _ in 0..windows {
        let (alpha, beta) = (10f64.powf(rng.random_range(-5.0..0.0)), rng.random_range(0.1..1.3));
        let (d, k) = (rng.random_range(2..20), rng.random_range(1..6));
        let w = random_window(&mut rng, d, k);
        let e = eigen_rescale_check(&w, alpha, beta)?;
        for x in &e {
            worst = worst.max((x.applied - x.scale).abs() / x.scale);
        }
        for a in &e {
            for b in &e {
                if a.lambda > b.lambda && a.scale >= b.scale {
                    ordered = false;
                }
            }
        }
    }
    Ok(Check::new(
        "eigen-rescaling",
        worst <= 1e-8 && ordered,
        format!("{windows} windows, max scale error {worst:.3e}, ordering {}", if ordered { "holds" } else { "violated" }),
    ))
}

pub fn degeneracy_suite(gradients: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..gradients {
        let d = rng.random_range(1..50);
        let alpha = 10f64.powf(rng.random_range(-5.0..=0.0));
        let c = ArrowConfig {
            alpha,
            beta: 0.0,
            window: 2,
            eta: rng.random_range(1e-4..1e-1),
            warmup: Warmup::Sgd,
            ..ArrowConfig::default()
        };
        let mut s = GroupState::new("g", d, &c);
        for _ in 0..2 {
            step(&mut s, &gaussian(&mut rng, d, 1.0), &c, alpha)?;
        }
        let g = gaussian(&mut rng, d, 1.0);
        ok &= step(&mut s, &g, &c, alpha)? == sgd_delta(c.eta / alpha, &g);
    }
    Ok(Check::new("beta = 0 degeneracy", ok, format!("{gradients} gradients, bitwise")))
}

/// Relative error with a 1e-8 floor on the denominator.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences on `coords` randomly chosen trainable coordinates of
/// a default two-block mini-ViT, per seed.
pub fn gradient_suite(seeds: &[u64], coords: usize) -> Result<Check> {
    let config = ModelConfig::Vit(MiniVitConfig::default());
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::build(&config, seed)?;
        let side = config.image_side();
        let batch = 4;
        let images = Tensor::new(vec![batch, side, side], gaussian(&mut rng, batch * side * side, 1.0))?;
        let labels: Vec<usize> = (0..batch).map(|i| i % config.classes_per_task()).collect();
        let task = rng.random_range(0..config.tasks());
        let step = model.loss_and_grads(&images, &labels, task)?;
        let mut pool: Vec<(usize, usize)> = model
            .params()
            .iter()
            .enumerate()
            .filter(|(i, _)| step.grads.reached[*i])
            .flat_map(|(i, g)| (0..g.tensor.numel()).map(move |j| (i, j)))
            .collect();
        pool.shuffle(&mut rng);
        for &(gi, j) in pool.iter().take(coords) {
            let mut plus = model.clone();
            plus.params_mut().groups_mut()[gi].tensor.data_mut()[j] += eps;
            let mut minus = model.clone();
            minus.params_mut().groups_mut()[gi].tensor.data_mut()[j] -= eps;
            let numeric = (plus.loss(&images, &labels, task)? - minus.loss(&images, &labels, task)?) / (2.0 * eps);
            worst = worst.max(gradient_error(step.grads.grads[gi].data()[j], numeric));
        }
    }
    Ok(Check::new(
        "backward vs finite differences",
        worst <= 1e-4,
        format!("{} seeds x {coords} coordinates, max relative error {worst:.3e}", seeds.len()),
    ))
}

pub fn rank_suite(matrices: usize, seed: u64) -> Result<Check> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-4;
    let mut ok = close(erank(&[1.0; 4])?.value, 4.0)
        && close(srank(&[1.0; 4])?.value, 4.0)
        && close(srank(&[2.0, 1.0])?.value, 1.25)
        && close(erank(&[3.0, 1.0])?.value, 1.7548);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..matrices {
        let (r, c) = (rng.random_range(1..12), rng.random_range(1..12));
        let a = Matrix::new(r, c, gaussian(&mut rng, r * c, 1.0))?;
        let base = rank_of_matrix(&a)?;
        let scaled = rank_of_matrix(&a.scaled(rng.random_range(0.1..10.0)))?;
        let mut rows: Vec<usize> = (0..r).collect();
        rows.shuffle(&mut rng);
        let permuted = Matrix::from_rows(&rows.iter().map(|&i| a.row(i).to_vec()).collect::<Vec<_>>())?;
        let perm = rank_of_matrix(&permuted.transpose())?;
        let tol = |x: f64, y: f64| (x - y).abs() <= 1e-8 * y.abs().max(1.0);
        ok &= tol(scaled.erank, base.erank) && tol(scaled.srank, base.srank);
        ok &= tol(perm.erank, base.erank) && tol(perm.srank, base.srank);
    }
    Ok(Check::new(
        "rank-metric oracles",
        ok,
        format!("fixtures plus {matrices} scale / permutation / transpose cases"),
    ))
}

/// Every suite at the sizes used by `plab verify`.
pub fn all() -> Result<Vec<Check>> {
    Ok(vec![
        woodbury_suite(1000, 1)?,
        eigen_suite(100, 2)?,
        degeneracy_suite(100, 3)?,
        gradient_suite(&[0, 1, 2, 3, 4], 20)?,
        rank_suite(100, 5)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for c in [
            woodbury_suite(30, 7).unwrap(),
            eigen_suite(10, 7).unwrap(),
            degeneracy_suite(10, 7).unwrap(),
            gradient_suite(&[7], 5).unwrap(),
            rank_suite(10, 7).unwrap(),
        ] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

//! Cross-checks of the in-house factorizations against nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use plab::arrow::{relative_error, woodbury_apply, GradientWindow};
use plab::linalg::{self, Matrix};
use plab::metrics::rank_of_matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

#[test]
fn singular_values_are_roots_of_gram_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..60 {
        let (r, c) = (rng.random_range(1..40), rng.random_range(1..40));
        let a = random(&mut rng, r, c);
        let ours = linalg::singular_values(&a).unwrap();
        let na = to_na(&a);
        let gram = na.transpose() * &na;
        let mut eig: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        let smax = eig[0];
        for (i, s) in ours.iter().enumerate() {
            assert!((s - eig[i]).abs() <= 1e-7 * smax.max(1.0), "{r}x{c} sigma_{i}: {s} vs {}", eig[i]);
        }
    }
}

#[test]
fn full_svd_agrees_with_nalgebra_and_reconstructs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let (r, c) = (rng.random_range(1..25), rng.random_range(1..25));
        let a = random(&mut rng, r, c);
        let ours = linalg::svd(&a).unwrap();
        let theirs = to_na(&a).svd(false, false).singular_values;
        let mut theirs: Vec<f64> = theirs.iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in ours.singular_values.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-10);
        }
        let (u, v) = (ours.u.unwrap(), ours.v.unwrap());
        let us = Matrix::new(
            u.rows(),
            u.cols(),
            (0..u.rows() * u.cols()).map(|i| u.data()[i] * ours.singular_values[i % u.cols()]).collect(),
        )
        .unwrap();
        let back = us.matmul(&v.transpose()).unwrap();
        let err: f64 = back.data().iter().zip(a.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "reconstruction error {err}");
    }
}

#[test]
fn frobenius_squared_equals_sum_of_squared_singular_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..30), rng.random_range(1..30));
        let a = random(&mut rng, r, c);
        let f = linalg::frobenius_norm(&a).unwrap();
        let s2: f64 = linalg::singular_values(&a).unwrap().iter().map(|s| s * s).sum();
        assert!((f * f - s2).abs() <= 1e-10 * s2.max(1.0));
    }
}

#[test]
fn rank_metrics_invariant_to_scale_permutation_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(2..20), rng.random_range(2..20));
        let a = random(&mut rng, r, c);
        let base = rank_of_matrix(&a).unwrap();
        let mut cols: Vec<usize> = (0..c).collect();
        cols.reverse();
        let permuted = Matrix::new(
            r,
            c,
            (0..r).flat_map(|i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| a.get(i, j)).collect(),
        )
        .unwrap();
        for other in [a.scaled(-7.5), permuted, a.transpose()] {
            let m = rank_of_matrix(&other).unwrap();
            assert!((m.erank - base.erank).abs() < 1e-9);
            assert!((m.srank - base.srank).abs() < 1e-9);
            assert_eq!(m.rank_r, base.rank_r);
        }
        assert!(base.erank >= 1.0 - 1e-12 && base.erank <= r.min(c) as f64 + 1e-9);
        assert!(base.srank >= 1.0 - 1e-12 && base.srank <= base.rank_r as f64 + 1e-9);
    }
}

#[test]
fn spd_solve_matches_nalgebra_cholesky() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 2, 7, 50, 120] {
        let b = random(&mut rng, n, n);
        let mut m = b.matmul(&b.transpose()).unwrap();
        for i in 0..n {
            m.set(i, i, m.get(i, i) + 0.1);
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ours = linalg::solve_spd(&m, &rhs).unwrap();
        let theirs = to_na(&m).cholesky().unwrap().solve(&DVector::from_vec(rhs.clone()));
        let theirs: Vec<f64> = theirs.iter().copied().collect();
        assert!(relative_error(&ours, &theirs) < 1e-9, "n = {n}");
    }
}

#[test]
fn woodbury_matches_nalgebra_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let d = rng.random_range(1..=60);
        let k = rng.random_range(1..=30);
        let scale = 1.0 / (d as f64).sqrt();
        let mut w = GradientWindow::new("g", d, k);
        let mut c = DMatrix::<f64>::zeros(d, d);
        for _ in 0..k {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            w.push(&v).unwrap();
            let dv = DVector::from_vec(v);
            c += &dv * dv.transpose();
        }
        let alpha = 10f64.powf(rng.random_range(-5.0..=0.0));
        let beta = rng.random_range(0.0..=1.3);
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let m = DMatrix::<f64>::identity(d, d) * alpha + c * (beta / k as f64);
        let x = m.lu().solve(&DVector::from_vec(g.clone())).unwrap();
        let x: Vec<f64> = x.iter().copied().collect();
        let ours = woodbury_apply(&w, alpha, beta, &g).unwrap();
        assert!(relative_error(&ours, &x) <= 1e-8, "d={d} k={k} alpha={alpha:e}");
    }
}

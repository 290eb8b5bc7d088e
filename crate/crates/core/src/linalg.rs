//! Dense row-major matrices and the handful of factorizations the rest of the
//! crate needs: one-sided Jacobi SVD, Householder QR (as an SVD preconditioner)
//! and Cholesky solves for symmetric positive definite systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep cap for the one-sided Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative orthogonality tolerance between column pairs.
const JACOBI_TOL: f64 = 1e-12;
/// Singular values below this fraction of sigma_max are treated as zero.
pub const SPECTRUM_CLAMP: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", &[self.rows, self.cols], &[x.len()]));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn frobenius_norm(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite entry in frobenius_norm".into()));
    }
    Ok(m.data.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Non-increasing, non-negative; length min(rows, cols).
    pub singular_values: Vec<f64>,
    /// rows x r left factor, when requested.
    pub u: Option<Matrix>,
    /// cols x r right factor, when requested.
    pub v: Option<Matrix>,
}

/// Full SVD with both factors via one-sided Jacobi on the columns.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    check_svd_input(a)?;
    if a.rows >= a.cols {
        jacobi_svd(a, true)
    } else {
        let r = jacobi_svd(&a.transpose(), true)?;
        Ok(SvdResult {
            singular_values: r.singular_values,
            u: r.v,
            v: r.u,
        })
    }
}

/// Singular values only. Tall inputs are reduced to their triangular QR factor
/// first, so the Jacobi sweeps run on a min(rows, cols) square matrix.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    check_svd_input(a)?;
    let tall = if a.rows >= a.cols { a.clone() } else { a.transpose() };
    let square = if tall.rows > tall.cols {
        householder_r(&tall)
    } else {
        tall
    };
    Ok(jacobi_svd(&square, false)?.singular_values)
}

fn check_svd_input(a: &Matrix) -> Result<()> {
    if a.rows.min(a.cols) == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("non-finite entry in svd input".into()));
    }
    Ok(())
}

/// Sets singular values below `SPECTRUM_CLAMP * sigma_max` to exactly zero.
pub fn clamp_spectrum(sv: &[f64]) -> Vec<f64> {
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let floor = SPECTRUM_CLAMP * max;
    sv.iter().map(|&s| if s <= floor { 0.0 } else { s }).collect()
}

// rows >= cols assumed.
fn jacobi_svd(a: &Matrix, want_factors: bool) -> Result<SvdResult> {
    let (m, n) = (a.rows, a.cols);
    // Column-major working copy so each column is contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = if want_factors {
        (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect()
    } else {
        Vec::new()
    };
    let fro = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let negligible = SPECTRUM_CLAMP * fro;

    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut converged = n < 2;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha.sqrt() <= negligible || beta.sqrt() <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
                norms[p] = dot(&left[p], &left[p]);
                norms[q] = dot(&right[0], &right[0]);
                if want_factors {
                    let (vl, vr) = v.split_at_mut(q);
                    rotate(&mut vl[p], &mut vr[0], c, s);
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "one-sided Jacobi SVD did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let singular_values: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();

    let (u, vm) = if want_factors {
        let mut u = Matrix::zeros(m, n);
        let mut vm = Matrix::zeros(n, n);
        for (k, &j) in order.iter().enumerate() {
            let s = sigma[j];
            if s > 0.0 {
                for i in 0..m {
                    u.set(i, k, cols[j][i] / s);
                }
            }
            for i in 0..n {
                vm.set(i, k, v[j][i]);
            }
        }
        (Some(u), Some(vm))
    } else {
        (None, None)
    };
    Ok(SvdResult {
        singular_values,
        u,
        v: vm,
    })
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Upper-triangular factor R (cols x cols) of a Householder QR; rows >= cols.
fn householder_r(a: &Matrix) -> Matrix {
    let (m, n) = (a.rows, a.cols);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = norm2(x);
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let f = 2.0 * dot(&v, tail) / vnorm2;
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= f * vi;
            }
        }
    }
    let mut r = Matrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r.set(i, j, col[i]);
        }
    }
    r
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors `m`, reading only its lower triangle.
    pub fn factor(m: &Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::shape("cholesky", &[m.rows, m.cols], &[m.cols, m.rows]));
        }
        let n = m.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = m.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::shape("cholesky solve", &[n, n], &[b.len()]));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        Ok(y)
    }
}

/// Solves `m x = b` for symmetric positive definite `m`.
pub fn solve_spd(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if m.rows != m.cols {
        return Err(Error::shape("solve_spd", &[m.rows, m.cols], &[b.len()]));
    }
    if !m.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite entry in solve_spd".into()));
    }
    for i in 0..m.rows {
        for j in 0..i {
            let (a, c) = (m.get(i, j), m.get(j, i));
            if (a - c).abs() > SYMMETRY_TOL * a.abs().max(c.abs()).max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "matrix not symmetric at ({i}, {j}): {a} vs {c}"
                )));
            }
        }
    }
    Cholesky::factor(m)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn identity_and_diagonal_spectra() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.singular_values, vec![1.0, 1.0, 1.0]);
        let s = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        let s = svd(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
    }

    #[test]
    fn reconstruction_tall_and_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(7, 4), (4, 7), (5, 5), (1, 6), (6, 1)] {
            let a = random(r, c, &mut rng);
            let s = svd(&a).unwrap();
            let (u, v) = (s.u.unwrap(), s.v.unwrap());
            let k = r.min(c);
            assert_eq!(s.singular_values.len(), k);
            let mut us = u.clone();
            for i in 0..us.rows() {
                for j in 0..k {
                    us.set(i, j, u.get(i, j) * s.singular_values[j]);
                }
            }
            let rec = us.matmul(&v.transpose()).unwrap();
            let err: f64 = rec
                .data()
                .iter()
                .zip(a.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-8 * frobenius_norm(&a).unwrap(), "{r}x{c}: {err}");
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn qr_preconditioned_values_agree_with_plain_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(60, 8, &mut rng);
        let plain = svd(&a).unwrap().singular_values;
        let fast = singular_values(&a).unwrap();
        for (x, y) in plain.iter().zip(&fast) {
            assert!(close(*x, *y, 1e-10));
        }
        let wide = singular_values(&a.transpose()).unwrap();
        for (x, y) in plain.iter().zip(&wide) {
            assert!(close(*x, *y, 1e-10));
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let m = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(Error::InvalidInput(_))));
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(Error::InvalidInput(_))));
        assert!(frobenius_norm(&m).is_err());
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn zero_matrix_has_zero_spectrum() {
        let s = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(s.singular_values, vec![0.0, 0.0]);
    }

    #[test]
    fn solve_spd_fixtures() {
        assert_eq!(solve_spd(&Matrix::identity(2), &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let x = solve_spd(&Matrix::diag(&[2.0, 4.0]), &[2.0, 4.0]).unwrap();
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let x = solve_spd(&Matrix::diag(&[5.0, 1.0]), &[2.0, 0.0]).unwrap();
        assert!((x[0] - 0.4).abs() < 1e-15 && x[1] == 0.0);
    }

    #[test]
    fn solve_spd_errors() {
        let indefinite = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_spd(&indefinite, &[1.0, 1.0]),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let asym = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(solve_spd(&asym, &[1.0, 1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn solve_spd_residual_up_to_200() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 5, 50, 200] {
            let a = random(n, n, &mut rng);
            let mut m = a.transpose().matmul(&a).unwrap();
            for i in 0..n {
                m.set(i, i, m.get(i, i) + 0.1);
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = solve_spd(&m, &b).unwrap();
            let mx = m.matvec(&x).unwrap();
            let resid = norm2(&mx.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
            let bound = 1e-10 * (frobenius_norm(&m).unwrap() * norm2(&x) + norm2(&b));
            assert!(resid <= bound, "n={n}: {resid} > {bound}");
        }
    }

    #[test]
    fn frobenius_fixtures() {
        assert_eq!(frobenius_norm(&Matrix::zeros(2, 3)).unwrap(), 0.0);
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(frobenius_norm(&m).unwrap(), 5.0);
    }

    #[test]
    fn clamp_zeroes_noise_floor() {
        assert_eq!(clamp_spectrum(&[2.0, 1e-13, 0.5]), vec![2.0, 0.0, 0.5]);
        assert_eq!(clamp_spectrum(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, Cholesky, Matrix};

/// Ring buffer of the last W flattened gradients of one group. Also keeps
/// the k x k Gram matrix of the stored vectors so that each push and each
/// apply costs O(d k) plus the k x k solve.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientWindow {
    group: String,
    dim: usize,
    capacity: usize,
    slots: Vec<Vec<f64>>,
    /// Slot the next push overwrites once the buffer is full.
    next: usize,
    gram: Vec<f64>,
}

/// Serialized form; the Gram matrix is recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub group: String,
    pub dim: usize,
    pub capacity: usize,
    pub fill: usize,
    pub next: usize,
    /// fill x dim, slot order.
    pub buffer: Vec<f64>,
}

impl GradientWindow {
    pub fn new(group: impl Into<String>, dim: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be >= 1");
        Self {
            group: group.into(),
            dim,
            capacity,
            slots: Vec::with_capacity(capacity),
            next: 0,
            gram: vec![0.0; capacity * capacity],
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.slots
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.next = 0;
        self.gram.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn push(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim {
            return Err(Error::shape("window push", &[self.dim], &[g.len()]));
        }
        let slot = if self.slots.len() < self.capacity {
            self.slots.push(g.to_vec());
            self.slots.len() - 1
        } else {
            let s = self.next;
            self.slots[s].copy_from_slice(g);
            self.next = (s + 1) % self.capacity;
            s
        };
        for j in 0..self.slots.len() {
            let v = dot(&self.slots[slot], &self.slots[j]);
            self.gram[slot * self.capacity + j] = v;
            self.gram[j * self.capacity + slot] = v;
        }
        Ok(())
    }

    /// G^T G over the filled slots.
    pub fn gram(&self) -> Matrix {
        let k = self.fill();
        let mut m = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                m.set(i, j, self.gram[i * self.capacity + j]);
            }
        }
        m
    }

    /// G as a d x k matrix (columns in slot order).
    pub fn as_matrix(&self) -> Matrix {
        let k = self.fill();
        let mut m = Matrix::zeros(self.dim, k);
        for (j, v) in self.slots.iter().enumerate() {
            for (i, x) in v.iter().enumerate() {
                m.set(i, j, *x);
            }
        }
        m
    }

    pub fn to_record(&self) -> WindowRecord {
        WindowRecord {
            group: self.group.clone(),
            dim: self.dim,
            capacity: self.capacity,
            fill: self.fill(),
            next: self.next,
            buffer: self.slots.concat(),
        }
    }

    pub fn from_record(r: &WindowRecord) -> Result<Self> {
        if r.capacity == 0 || r.fill > r.capacity || r.buffer.len() != r.fill * r.dim || r.next >= r.capacity {
            return Err(Error::InvalidInput(format!("inconsistent window record for {}", r.group)));
        }
        let mut w = Self::new(r.group.clone(), r.dim, r.capacity);
        for chunk in r.buffer.chunks(r.dim.max(1)).take(r.fill) {
            w.push(chunk)?;
        }
        w.next = r.next;
        Ok(w)
    }
}

/// (alpha I + beta C)^{-1} g with C = (1/k) G G^T, through the Woodbury
/// identity with U = sqrt(beta/k) G:
/// g/alpha - U (I + U^T U / alpha)^{-1} U^T g / alpha^2.
pub fn woodbury_apply(window: &GradientWindow, alpha: f64, beta: f64, g: &[f64]) -> Result<Vec<f64>> {
    let k = window.fill();
    if k == 0 {
        return Err(Error::Contract("woodbury_apply on an empty window".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be > 0, got {alpha}")));
    }
    if g.len() != window.dim() {
        return Err(Error::shape("woodbury_apply", &[window.dim()], &[g.len()]));
    }
    let s = beta / k as f64;
    let mut inner = window.gram().scaled(s / alpha);
    for i in 0..k {
        inner.set(i, i, inner.get(i, i) + 1.0);
    }
    let gtg: Vec<f64> = window.vectors().iter().map(|v| dot(v, g)).collect();
    let y = Cholesky::factor(&inner)
        .map_err(|e| Error::Numeric(format!("Woodbury inner system of {}: {e}", window.group())))?
        .solve(&gtg)?;
    let c = s / (alpha * alpha);
    let mut out: Vec<f64> = g.iter().map(|x| x / alpha).collect();
    for (v, yj) in window.vectors().iter().zip(&y) {
        let w = c * yj;
        for (o, x) in out.iter_mut().zip(v) {
            *o -= w * x;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite Woodbury result for {}", window.group())));
    }
    Ok(out)
}

/// Dense reference: builds alpha I + beta C explicitly and solves it.
/// Only meant for tests.
pub fn direct_apply(window: &GradientWindow, alpha: f64, beta: f64, g: &[f64]) -> Result<Vec<f64>> {
    let d = window.dim();
    let k = window.fill().max(1) as f64;
    let mut m = Matrix::identity(d).scaled(alpha);
    for v in window.vectors() {
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, m.get(i, j) + beta * v[i] * v[j] / k);
            }
        }
    }
    linalg::solve_spd(&m, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenScale {
    pub lambda: f64,
    /// 1 / (alpha + beta lambda)
    pub scale: f64,
    /// u^T woodbury_apply(u) for the unit eigenvector u.
    pub applied: f64,
    /// || woodbury_apply(u) - scale u || / scale
    pub residual: f64,
}

/// Eigenpairs of C from the SVD of G / sqrt(k), each checked against the
/// Woodbury apply.
pub fn eigen_rescale_check(window: &GradientWindow, alpha: f64, beta: f64) -> Result<Vec<EigenScale>> {
    let k = window.fill();
    if k == 0 {
        return Err(Error::Contract("eigen_rescale_check on an empty window".into()));
    }
    let g = window.as_matrix().scaled(1.0 / (k as f64).sqrt());
    let svd = linalg::svd(&g)?;
    let u = svd.u.expect("svd returns both factors");
    let mut out = Vec::with_capacity(svd.singular_values.len());
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        let ui: Vec<f64> = (0..u.rows()).map(|r| u.get(r, i)).collect();
        if linalg::norm2(&ui) < 0.5 {
            // Null column of a rank-deficient window; no eigenvector.
            continue;
        }
        let lambda = sigma * sigma;
        let scale = 1.0 / (alpha + beta * lambda);
        let w = woodbury_apply(window, alpha, beta, &ui)?;
        let diff: Vec<f64> = w.iter().zip(&ui).map(|(a, b)| a - scale * b).collect();
        out.push(EigenScale {
            lambda,
            scale,
            applied: dot(&ui, &w),
            residual: linalg::norm2(&diff) / scale,
        });
    }
    Ok(out)
}

/// Relative error ||a - b|| / ||b||, or ||a - b|| when b is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nb = linalg::norm2(b);
    let nd = linalg::norm2(&diff);
    if nb == 0.0 {
        nd
    } else {
        nd / nb
    }
}

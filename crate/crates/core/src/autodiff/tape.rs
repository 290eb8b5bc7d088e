use super::kernels::{self, gelu, gelu_grad};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation in execution order; `backward` replays it
/// in reverse. Node order is the topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zero when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient flowed into `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// (g,m,k) x (g,k,n) -> (g,m,n)
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            kernels::gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul(a, b), rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        let f: fn(f64, f64) -> f64 = if op == "add" { |x, y| x + y } else { |x, y| x * y };
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.elementwise(a, b, "add")?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.elementwise(a, b, "mul")?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, x: Var, b: Var, op: &'static str) -> Result<usize> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let (_, cols) = self.value(x).rows_cols();
        if sb.len() != 1 || sb[0] != cols || sx.is_empty() {
            return Err(Error::shape(op, sx, sb));
        }
        Ok(cols)
    }

    /// Adds a vector of length = last dim to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.row_broadcast(x, bias, "add_row")?;
        let bd = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Multiplies every row elementwise by a vector of length = last dim.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let cols = self.row_broadcast(x, gain, "mul_row")?;
        let gd = self.value(gain).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[i % cols])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::MulRow(x, gain), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (_, cols) = src.rows_cols();
        let mut out = vec![0.0; src.numel()];
        kernels::softmax_rows(src.data(), cols, &mut out);
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Standardizes each row over the last axis (no affine).
    pub fn layernorm(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (_, cols) = src.rows_cols();
        let mut out = vec![0.0; src.numel()];
        let inv_std = kernels::layernorm_rows(src.data(), cols, &mut out);
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes; `axes[i]` is the input axis that becomes output axis i.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", &shape, axes));
        }
        let (out_shape, index) = kernels::permutation_index(&shape, axes);
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut axis_len = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy of (batch, classes) logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        kernels::softmax_rows(self.value(logits).data(), c, &mut probs);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].ln())
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            self.propagate(node, &up, &mut grads);
            grads[idx] = Some(up);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their entries; interior sums are dropped.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| kernels::gemm_nt(up, bd, g, m, n, k));
                acc(*b, &mut |g| kernels::gemm_tn(ad, up, g, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..bt {
                        kernels::gemm_nt(
                            &up[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut g[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..bt {
                        kernels::gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &up[i * m * n..(i + 1) * m * n],
                            &mut g[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, up));
                acc(*b, &mut |g| add_into(g, up));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, u), y) in g.iter_mut().zip(up).zip(bd) {
                        *gi += u * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, u), x) in g.iter_mut().zip(up).zip(ad) {
                        *gi += u * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let cols = self.value(*bias).numel();
                acc(*x, &mut |g| add_into(g, up));
                acc(*bias, &mut |g| {
                    for row in up.chunks(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRow(x, gain) => {
                let cols = self.value(*gain).numel();
                let (xd, gd) = (self.value(*x).data(), self.value(*gain).data());
                acc(*x, &mut |g| {
                    for (i, (gi, u)) in g.iter_mut().zip(up).enumerate() {
                        *gi += u * gd[i % cols];
                    }
                });
                acc(*gain, &mut |g| {
                    for (urow, xrow) in up.chunks(cols).zip(xd.chunks(cols)) {
                        for ((gi, u), xv) in g.iter_mut().zip(urow).zip(xrow) {
                            *gi += u * xv;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (gi, u) in g.iter_mut().zip(up) {
                    *gi += c * u;
                }
            }),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, u), xv) in g.iter_mut().zip(up).zip(xd) {
                        if *xv > 0.0 {
                            *gi += u;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, u), xv) in g.iter_mut().zip(up).zip(xd) {
                        *gi += u * gelu_grad(*xv);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                acc(*x, &mut |g| {
                    for ((grow, urow), yrow) in g.chunks_mut(cols).zip(up.chunks(cols)).zip(y.chunks(cols)) {
                        let dotp: f64 = urow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((gi, u), yv) in grow.iter_mut().zip(urow).zip(yrow) {
                            *gi += yv * (u - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let n = cols as f64;
                acc(*x, &mut |g| {
                    for (r, ((grow, urow), yrow)) in g
                        .chunks_mut(cols)
                        .zip(up.chunks(cols))
                        .zip(y.chunks(cols))
                        .enumerate()
                    {
                        let mean_u = urow.iter().sum::<f64>() / n;
                        let mean_uy = urow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((gi, u), yv) in grow.iter_mut().zip(urow).zip(yrow) {
                            *gi += inv_std[r] * (u - mean_u - yv * mean_uy);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, up)),
            Op::Permute { x, axes } => {
                let (_, index) = kernels::permutation_index(self.shape(*x), axes);
                acc(*x, &mut |g| {
                    for (u, &src) in up.iter().zip(&index) {
                        g[src] += u;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    acc(*p, &mut |g| {
                        for o in 0..outer {
                            let src = &up[o * row + offset..o * row + offset + chunk];
                            add_into(&mut g[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let out_len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = o * in_shape[*axis] * inner + start * inner;
                        let src = &up[o * out_len * inner..(o + 1) * out_len * inner];
                        add_into(&mut g[dst..dst + out_len * inner], src);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += up[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += up[0] / n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                acc(*logits, &mut |g| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            g[i * c + j] += up[0] * (probs[i * c + j] - onehot) / b;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

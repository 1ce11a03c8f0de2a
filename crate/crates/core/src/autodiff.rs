//! Reverse-mode differentiation over a recorded tape.
//!
//! Every primitive evaluated through a [`Graph`] appends one node holding its
//! output value and whatever it needs for the backward pass. Nodes are only
//! ever appended, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! There is no broadcasting: the only scalar-times-tensor op is
//! [`Graph::scale`], and row broadcasts go through [`Graph::repeat_rows`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs whose pre-normalization norm falls below this are rejected.
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    L2Normalize { input: usize, norms: Vec<f64> },
    Cosine(usize, usize),
    SquaredError(usize, usize),
    Concat(Vec<usize>),
    RepeatRows(usize),
    Transpose(usize),
    LogSumExpRows(usize),
    Diag(usize),
    Reshape(usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape. Confined to one thread; build one per evaluation.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable root.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a value that gradients never flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    /// Copies the current value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
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

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| self.mismatch("add", a, b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| self.mismatch("sub", a, b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| self.mismatch("mul", a, b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Scale(a.0, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Tanh(a.0), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Softplus(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Normalizes along the last axis (each row of a matrix, or a whole vector).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for r in v.data().chunks(cols) {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > MIN_NORM) {
                return Err(Error::DegenerateNorm { norm });
            }
            norms.push(norm);
            out.extend(r.iter().map(|x| x / norm));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::L2Normalize { input: a.0, norms }, rg))
    }

    /// Cosine similarity along the last axis: scalar for vectors, one value
    /// per row for matrices.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.ndim() == 0 || va.ndim() > 2 {
            return Err(self.mismatch("cosine_similarity", a, b));
        }
        let cols = va.cols();
        let mut out = Vec::with_capacity(va.rows());
        for (ra, rb) in va.data().chunks(cols).zip(vb.data().chunks(cols)) {
            let (na, nb) = (norm(ra), norm(rb));
            if !(na > MIN_NORM) || !(nb > MIN_NORM) {
                return Err(Error::DegenerateNorm { norm: na.min(nb) });
            }
            out.push(dot(ra, rb) / (na * nb));
        }
        let t = if va.ndim() == 1 {
            Tensor::scalar(out[0])
        } else {
            Tensor::vector(out)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Cosine(a.0, b.0), rg))
    }

    /// Sum of squared differences, a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| self.mismatch("squared_error", a, b))?;
        let s = d.data().iter().map(|x| x * x).sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a.0, b.0), rg))
    }

    /// Concatenates along the last axis. All inputs must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat inputs"))?;
        let lead = self
            .shape(*first)
            .split_last()
            .map(|(_, l)| l.to_vec())
            .unwrap_or_default();
        if self.shape(*first).is_empty() {
            return Err(Error::shape("concat", "cannot concatenate scalars"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs leading {lead:?}", s),
                ));
            }
            total += s[lead.len()];
        }
        let rows = self.value(*first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::Concat(ids), rg))
    }

    /// Stacks a vector (or `1 x n` matrix) `count` times into a `count x n` matrix.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != 1 || v.ndim() == 0 || v.ndim() > 2 || count == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("{:?} x{count}", v.shape()),
            ));
        }
        let n = v.cols();
        let mut out = Vec::with_capacity(count * n);
        for _ in 0..count {
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![count, n], out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::RepeatRows(a.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", v.shape())));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let t = Tensor::new(vec![n, m], transpose(v.data(), m, n))?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Transpose(a.0), rg))
    }

    /// Row-wise `log(sum(exp(row)))` of a matrix.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 {
            return Err(Error::shape("logsumexp_rows", format!("{:?}", v.shape())));
        }
        let out: Vec<f64> = v.data().chunks(v.cols()).map(logsumexp).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::vector(out), Op::LogSumExpRows(a.0), rg))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || v.shape()[0] != v.shape()[1] {
            return Err(Error::shape("diag", format!("{:?}", v.shape())));
        }
        let n = v.shape()[0];
        let out = (0..n).map(|i| v.data()[i * n + i]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::vector(out), Op::Diag(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        let mut out = Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        };
        // only roots carry meaningful gradients for callers; drop intermediates
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                out.grads[i] = None;
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[*a].requires_grad {
                    let da = matmul_nt(g.data(), vb.data(), m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let db = matmul_tn(va.data(), g.data(), m, k, n);
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.data().to_vec());
                self.acc(grads, *b, g.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.data().to_vec());
                self.acc(grads, *b, g.data().iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.acc(
                    grads,
                    *a,
                    g.data().iter().zip(vb).map(|(g, y)| g * y).collect(),
                );
                self.acc(
                    grads,
                    *b,
                    g.data().iter().zip(va).map(|(g, x)| g * x).collect(),
                );
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, g.data().iter().map(|x| x * s).collect());
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.nodes[*a].value.data();
                let d = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                self.acc(grads, *a, vec![g.data()[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                self.acc(grads, *a, vec![g.data()[0] / n as f64; n]);
            }
            Op::L2Normalize { input, norms } => {
                let cols = val.cols();
                let mut d = Vec::with_capacity(val.len());
                for ((y, gy), &nrm) in val
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(norms)
                {
                    let proj = dot(y, gy);
                    d.extend(y.iter().zip(gy).map(|(y, gy)| (gy - y * proj) / nrm));
                }
                self.acc(grads, *input, d);
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let cols = va.cols();
                let mut da = Vec::with_capacity(va.len());
                let mut db = Vec::with_capacity(vb.len());
                for (r, (ra, rb)) in va
                    .data()
                    .chunks(cols)
                    .zip(vb.data().chunks(cols))
                    .enumerate()
                {
                    let (na, nb) = (norm(ra), norm(rb));
                    let c = val.data()[r];
                    let gr = g.data()[r];
                    let inv = 1.0 / (na * nb);
                    da.extend(
                        ra.iter()
                            .zip(rb)
                            .map(|(x, y)| gr * (y * inv - c * x / (na * na))),
                    );
                    db.extend(
                        ra.iter()
                            .zip(rb)
                            .map(|(x, y)| gr * (x * inv - c * y / (nb * nb))),
                    );
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let s = g.data()[0];
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| 2.0 * s * (x - y)).collect();
                let nd = d.iter().map(|x| -x).collect();
                self.acc(grads, *a, d);
                self.acc(grads, *b, nd);
            }
            Op::Concat(ids) => {
                let rows = val.rows();
                let total = val.cols();
                let mut offset = 0;
                for &p in ids {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].requires_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::RepeatRows(a) => {
                let n = val.cols();
                let mut d = vec![0.0; n];
                for r in g.data().chunks(n) {
                    for (acc, x) in d.iter_mut().zip(r) {
                        *acc += x;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => {
                let (m, n) = (val.shape()[0], val.shape()[1]);
                self.acc(grads, *a, transpose(g.data(), m, n));
            }
            Op::LogSumExpRows(a) => {
                let va = &self.nodes[*a].value;
                let cols = va.cols();
                let mut d = Vec::with_capacity(va.len());
                for ((row, &lse), &gr) in va.data().chunks(cols).zip(val.data()).zip(g.data()) {
                    d.extend(row.iter().map(|x| gr * (x - lse).exp()));
                }
                self.acc(grads, *a, d);
            }
            Op::Diag(a) => {
                let n = val.len();
                let mut d = vec![0.0; n * n];
                for (k, gk) in g.data().iter().enumerate() {
                    d[k * n + k] = *gk;
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, g.data().to_vec());
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, d: Vec<f64>) {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(t) => {
                for (x, y) in t.data_mut().iter_mut().zip(&d) {
                    *x += y;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape().to_vec(), d).expect("gradient shape"));
            }
        }
    }
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a - b| / max(1, |a|, |b|)`, maximized over elements.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `A[m,k] @ B[k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `G[m,n] @ B[k,n]^T`, giving `[m,k]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `A[m,k]^T @ G[m,n]`, giving `[k,n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

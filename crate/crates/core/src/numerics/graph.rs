//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for the chain rule. Graphs are built fresh for every
//! step and dropped afterwards.

use crate::error::{Error, Result};

use super::tensor::{self, Tensor, NORM_EPS};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sum(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Reshape(Var),
    L2Normalize(Var),
    Softmax(Var, f64),
    WeightedLse(Var, Tensor),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_t(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.len() != sb.len() || sa.cols() != sb.cols() {
            return Err(Error::Shape {
                op,
                lhs: sa.shape().to_vec(),
                rhs: sb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `[m × n] -> [1 × n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if m == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let mut data = vec![0.0; n];
        for row in ta.row_iter() {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(1, n, data)?, Op::MeanRows(a), rg))
    }

    /// Row gather; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {:?}",
                ta.shape()
            )));
        }
        let out = ta.select_rows(&idx);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Gather(a, idx), rg))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, vec![i])
    }

    /// Stacks the rows of every part; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let out = tensor::l2_normalize(self.value(a));
        let rg = self.needs(&[a]);
        self.push(out, Op::L2Normalize(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a), temperature)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a, temperature), rg))
    }

    /// Per-row `log Σ_j w_ij exp(x_ij)` as an `[m × 1]` column.
    ///
    /// Weights are constants and must be non-negative with at least one
    /// positive entry per row.
    pub fn weighted_logsumexp_rows(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if weights.shape() != ta.shape() {
            return Err(Error::Shape {
                op: "weighted_logsumexp_rows",
                lhs: ta.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(ta.rows());
        for (i, (row, w)) in ta.row_iter().zip(weights.row_iter()).enumerate() {
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::Contract(format!("negative weight in row {i}")));
            }
            let max = row
                .iter()
                .zip(w)
                .filter(|(_, &wv)| wv > 0.0)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("row {i} has no positive weight")));
            }
            let s: f64 = row.iter().zip(w).map(|(x, wv)| wv * (x - max).exp()).sum();
            out.push(max + s.ln());
        }
        let m = out.len();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::WeightedLse(a, weights), rg))
    }

    /// Picks `x[i, idx[i]]` from every row, as an `[m × 1]` column.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if idx.len() != ta.rows() || idx.iter().any(|&j| j >= ta.cols()) {
            return Err(Error::Contract(format!(
                "pick indices {idx:?} incompatible with {:?}",
                ta.shape()
            )));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| ta.get(i, j)).collect();
        let m = out.len();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::Pick(a, idx), rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Clears earlier gradients; afterwards every node that requires a
    /// gradient holds one of its own shape (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let gt = || Tensor::new(out.shape().to_vec(), g.to_vec());

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let gm = Tensor::matrix(out.rows(), out.cols(), g.to_vec())?;
                let da = tensor::matmul_t(&gm, tb)?;
                let db = tensor::matmul(&ta.transpose(), &gm)?;
                acc(*a, &|buf| add_into(buf, da.data()));
                acc(*b, &|buf| add_into(buf, db.data()));
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let gm = Tensor::matrix(out.rows(), out.cols(), g.to_vec())?;
                let da = tensor::matmul(&gm, tb)?;
                let db = tensor::matmul(&gm.transpose(), ta)?;
                acc(*a, &|buf| add_into(buf, da.data()));
                acc(*b, &|buf| add_into(buf, db.data()));
            }
            Op::Transpose(a) => {
                let d = gt()?.transpose();
                acc(*a, &|buf| add_into(buf, d.data()));
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|buf| {
                    for ((d, x), y) in buf.iter_mut().zip(g).zip(tb) {
                        *d += x * y;
                    }
                });
                acc(*b, &|buf| {
                    for ((d, x), y) in buf.iter_mut().zip(g).zip(ta) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let c = out.cols();
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| {
                    for (i, x) in g.iter().enumerate() {
                        buf[i % c] += x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &|buf| {
                    buf.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)
                });
            }
            Op::Tanh(a) => {
                acc(*a, &|buf| {
                    for ((d, x), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *d += x * (1.0 - y * y);
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &|buf| buf.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).rows() as f64;
                let n = out.cols();
                acc(*a, &|buf| {
                    for (i, d) in buf.iter_mut().enumerate() {
                        *d += g[i % n] / m;
                    }
                });
            }
            Op::Gather(a, idx) => {
                let c = out.cols();
                acc(*a, &|buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut buf[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let slice = &g[offset..offset + n];
                    acc(*p, &|buf| add_into(buf, slice));
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                acc(*a, &|buf| add_into(buf, g));
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let c = x.cols();
                acc(*a, &|buf| {
                    for (r, xr) in x.row_iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let (yr, gr) = (&out.data()[span.clone()], &g[span.clone()]);
                        let n = tensor::norm(xr);
                        let dst = &mut buf[span];
                        if n > NORM_EPS {
                            let yg = tensor::dot(yr, gr);
                            for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                                *d += (gi - yi * yg) / n;
                            }
                        } else {
                            for (d, gi) in dst.iter_mut().zip(gr) {
                                *d += gi / NORM_EPS;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, temperature) => {
                let c = out.cols();
                acc(*a, &|buf| {
                    for (r, yr) in out.row_iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let yg = tensor::dot(yr, gr);
                        for (k, d) in buf[r * c..(r + 1) * c].iter_mut().enumerate() {
                            *d += yr[k] * (gr[k] - yg) / temperature;
                        }
                    }
                });
            }
            Op::WeightedLse(a, w) => {
                let x = self.value(*a);
                let c = x.cols();
                acc(*a, &|buf| {
                    for (r, (xr, wr)) in x.row_iter().zip(w.row_iter()).enumerate() {
                        let lse = out.data()[r];
                        for (k, d) in buf[r * c..(r + 1) * c].iter_mut().enumerate() {
                            if wr[k] > 0.0 {
                                *d += g[r] * wr[k] * (xr[k] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let c = self.value(*a).cols();
                acc(*a, &|buf| {
                    for (r, &j) in idx.iter().enumerate() {
                        buf[r * c + j] += g[r];
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

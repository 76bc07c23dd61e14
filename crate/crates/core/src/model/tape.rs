//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! The tape records every operation of one forward pass. Nodes whose inputs
//! do not require gradients are never visited by [`Tape::backward`], so
//! frozen sub-graphs cost nothing beyond the forward pass.

use crate::attention::{grouped_attention, AttentionGroup};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub type Var = usize;

enum Op {
    Leaf,
    /// `x · wᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    /// Adds a `k × n` table to each consecutive block of `k` rows.
    AddTiled(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<AttentionGroup>,
        probs: Vec<Matrix>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v].value
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_t(self.value(w))?;
        let ng = self.needs(&[x, w]);
        Ok(self.push(value, Op::MatMulT(x, w), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err("add_row", xv, rv));
        }
        let mut value = xv.clone();
        let r = rv.row(0);
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        if tv.cols() != xv.cols() || tv.rows() == 0 || xv.rows() % tv.rows() != 0 {
            return Err(shape_err("add_tiled", xv, tv));
        }
        let mut value = xv.clone();
        let k = tv.rows();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(tv.row(i % k)) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, table]);
        Ok(self.push(value, Op::AddTiled(x, table), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if gv.shape() != (1, n) || bv.shape() != (1, n) {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut value = Matrix::zeros(xv.rows(), n);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (h, a) in xh.iter_mut().zip(row) {
                *h = (a - mean) * is;
            }
            let out = value.row_mut(i);
            for j in 0..n {
                out[j] = xhat[(i, j)] * gv[(0, j)] + bv[(0, j)];
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|a| a / (1.0 + (-a).exp()));
        let ng = self.needs(&[x]);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for a {}-row table",
                tv.rows()
            )));
        }
        let value = tv.select_rows(ids);
        let ng = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: Vec<AttentionGroup>) -> Result<Var> {
        let (value, probs) = grouped_attention(self.value(q), self.value(k), self.value(v), &groups)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, groups, probs }, ng))
    }

    /// Back-propagates `seed = ∂L/∂out` and returns the gradient of every
    /// node that requires one.
    pub fn backward(&self, out: Var, seed: Matrix) -> Result<Grads> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward", self.value(out), &seed));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, op: &Op, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, d: Matrix| -> Result<()> {
            match &mut grads[v] {
                Some(existing) => existing.add_assign(&d),
                slot => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        let wants = |v: Var| self.nodes[v].needs_grad;
        match op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                if wants(*x) {
                    acc(*x, g.matmul(self.value(*w))?)?;
                }
                if wants(*w) {
                    acc(*w, g.t_matmul(self.value(*x))?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone())?;
                }
                if wants(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    acc(*x, g.clone())?;
                }
                if wants(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, a) in s.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += a;
                        }
                    }
                    acc(*row, s)?;
                }
            }
            Op::AddTiled(x, table) => {
                if wants(*x) {
                    acc(*x, g.clone())?;
                }
                if wants(*table) {
                    let k = self.value(*table).rows();
                    let mut s = Matrix::zeros(k, g.cols());
                    for i in 0..g.rows() {
                        for (o, a) in s.row_mut(i % k).iter_mut().zip(g.row(i)) {
                            *o += a;
                        }
                    }
                    acc(*table, s)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gv = self.value(*gamma);
                if wants(*gamma) {
                    let mut dg = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for j in 0..n {
                            dg[(0, j)] += g[(i, j)] * xhat[(i, j)];
                        }
                    }
                    acc(*gamma, dg)?;
                }
                if wants(*beta) {
                    let mut db = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for (o, a) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += a;
                        }
                    }
                    acc(*beta, db)?;
                }
                if wants(*x) {
                    let mut dx = Matrix::zeros(g.rows(), n);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..g.rows() {
                        for j in 0..n {
                            dxhat[j] = g[(i, j)] * gv[(0, j)];
                        }
                        let xh = xhat.row(i);
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        let row = dx.row_mut(i);
                        for j in 0..n {
                            row[j] = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(*x, dx)?;
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let d = xv.zip_with(g, "silu", |a, gy| {
                        let s = 1.0 / (1.0 + (-a).exp());
                        gy * s * (1.0 + a * (1.0 - s))
                    })?;
                    acc(*x, d)?;
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let tv = self.value(*table);
                    let mut d = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, a) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                    acc(*table, d)?;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let scale = 1.0 / (qv.cols() as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                let mut dp = Vec::new();
                for (grp, p) in groups.iter().zip(probs) {
                    dp.resize(grp.keys.len(), 0.0);
                    for (a, &qi) in grp.queries.iter().enumerate() {
                        let go = g.row(qi);
                        let p_row = p.row(a);
                        let mut s = 0.0;
                        for (b, &ki) in grp.keys.iter().enumerate() {
                            dp[b] = dot(go, vv.row(ki));
                            s += p_row[b] * dp[b];
                            for (o, x) in dv.row_mut(ki).iter_mut().zip(go) {
                                *o += p_row[b] * x;
                            }
                        }
                        let q_row = qv.row(qi);
                        for (b, &ki) in grp.keys.iter().enumerate() {
                            let ds = p_row[b] * (dp[b] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for (o, x) in dq.row_mut(qi).iter_mut().zip(kv.row(ki)) {
                                *o += ds * x;
                            }
                            for (o, x) in dk.row_mut(ki).iter_mut().zip(q_row) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                if wants(*q) {
                    acc(*q, dq)?;
                }
                if wants(*k) {
                    acc(*k, dk)?;
                }
                if wants(*v) {
                    acc(*v, dv)?;
                }
            }
        }
        Ok(())
    }
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v).and_then(Option::take)
    }
}

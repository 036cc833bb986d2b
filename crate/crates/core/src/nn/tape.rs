//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive records the
//! handles of its inputs plus whatever it needs to run backwards; parameters
//! are borrowed rather than copied. [`Tape::backward`] walks the record in
//! reverse and accumulates parameter gradients into a [`Gradients`].

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::nn::matrix::{gemm, gemm_raw, Operand};
use crate::nn::params::{Gradients, ParamId};
use crate::nn::Matrix;

const RMS_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMulT(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
        weight: f64,
    },
    HardCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
        weight: f64,
    },
    SquaredError {
        x: Var,
        target: Matrix,
        weight: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Record of the primitives executed during one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_slice()[0]
    }

    pub fn into_value(mut self, v: Var) -> Matrix {
        std::mem::replace(&mut self.nodes[v.0].value, Cow::Owned(Matrix::zeros(0, 0))).into_owned()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// A parameter borrowed from its store; gradients flow to it only when `trainable`.
    pub fn param(&mut self, id: ParamId, value: &'a Matrix, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(id), trainable)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulT(a, b), ng))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    /// `y = x·Wᵀ (+ b)` with `W` of shape `out × in` and `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                (r, c),
                self.shape(row)
            )));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape("mul shape mismatch".into()));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(Matrix::from_raw(r, c, data)), Op::Mul(a, b), ng))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `rows × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::Shape(format!(
                "mul_col {:?} * {:?}",
                (r, c),
                self.shape(col)
            )));
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            let s = self.value(col).as_slice()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(Cow::Owned(out), Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    /// SiLU activation `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Silu(a), ng)
    }

    /// Root-mean-square normalisation of each row followed by a learned `1 × d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) {
            return Err(Error::Shape("rms_norm gain shape".into()));
        }
        let xv = self.value(x);
        let g = self.value(gain).as_slice();
        let mut out = Matrix::zeros(r, c);
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, v), gv) in out.row_mut(i).iter_mut().zip(row).zip(g) {
                *o = v * inv * gv;
            }
        }
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(Cow::Owned(out), Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::SoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + width > c {
            return Err(Error::Shape("slice_cols out of range".into()));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Cow::Owned(Matrix::from_raw(r, width, data)),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        if start + count > self.shape(x).0 {
            return Err(Error::Shape("slice_rows out of range".into()));
        }
        let out = self.value(x).slice_rows(start, start + count);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Cow::Owned(Matrix::from_raw(ra, ca + cb, data)),
            Op::ConcatCols(a, b),
            ng,
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!(
                "row index {bad} out of range for table with {n} rows"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Cow::Owned(Matrix::from_raw(ids.len(), c, data)),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head causal scaled dot-product attention over `L × d` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.shape(q);
        if self.shape(k) != (l, d) || self.shape(v) != (l, d) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} columns do not split into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(l, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut scores = Matrix::zeros(l, l);
            gemm(
                l,
                dh,
                l,
                Operand::block(&qv.as_slice()[off..], d, false),
                Operand::block(&kv.as_slice()[off..], d, true),
                &mut scores,
                false,
            );
            for i in 0..l {
                let row = scores.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= sum;
                }
                row[i + 1..].fill(0.0);
            }
            gemm_raw(
                l,
                l,
                dh,
                Operand::plain(&scores),
                Operand::block(&vv.as_slice()[off..], d, false),
                &mut out.as_mut_slice()[off..],
                d,
                false,
            );
            probs.push(scores);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Cow::Owned(out),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// `weight · Σ_rows −Σ_v targets[v]·log softmax(logits)[v]`, a `1 × 1` value.
    ///
    /// `targets` must have the same shape as `logits`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix, weight: f64) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::Shape(format!(
                "soft cross entropy logits {:?} vs targets {:?}",
                self.shape(logits),
                targets.shape()
            )));
        }
        let lv = self.value(logits);
        let probs = super::softmax_rows(lv);
        let mut total = 0.0;
        for i in 0..lv.rows() {
            let lse = log_sum_exp(lv.row(i));
            for (t, z) in targets.row(i).iter().zip(lv.row(i)) {
                if *t != 0.0 {
                    total -= t * (z - lse);
                }
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Cow::Owned(Matrix::row_vector(vec![weight * total])),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
                weight,
            },
            ng,
        ))
    }

    /// `weight · Σ_rows −log softmax(logits)[label]`, a `1 × 1` value.
    pub fn hard_cross_entropy(&mut self, logits: Var, labels: &[usize], weight: f64) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(Error::Shape("hard cross entropy labels do not fit logits".into()));
        }
        let lv = self.value(logits);
        let probs = super::softmax_rows(lv);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| log_sum_exp(lv.row(i)) - lv.get(i, y))
            .sum();
        let ng = self.needs(logits);
        Ok(self.push(
            Cow::Owned(Matrix::row_vector(vec![weight * total])),
            Op::HardCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weight,
            },
            ng,
        ))
    }

    /// `weight · Σ (x − target)²`, a `1 × 1` value.
    pub fn squared_error(&mut self, x: Var, target: Matrix, weight: f64) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::Shape("squared error shape mismatch".into()));
        }
        let total: f64 = self
            .value(x)
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let ng = self.needs(x);
        Ok(self.push(
            Cow::Owned(Matrix::row_vector(vec![weight * total])),
            Op::SquaredError { x, target, weight },
            ng,
        ))
    }

    /// Back-propagates from the `1 × 1` value `loss`, adding `scale · ∂loss/∂θ` into `grads`.
    pub fn backward(&self, loss: Var, scale: f64, grads: &mut Gradients) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::row_vector(vec![scale]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backward_node(node, g, &mut adj, grads);
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node<'a>,
        g: Matrix,
        adj: &mut [Option<Matrix>],
        grads: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, &g, 1.0),
            Op::MatMulT(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(
                        g.rows(),
                        g.cols(),
                        bv.cols(),
                        Operand::plain(&g),
                        Operand::plain(bv),
                        &mut da,
                        false,
                    );
                    accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(
                        g.cols(),
                        g.rows(),
                        av.cols(),
                        Operand::transposed(&g),
                        Operand::plain(av),
                        &mut db,
                        false,
                    );
                    accumulate(adj, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                // y = a·b: da = g·bᵀ, db = aᵀ·g
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(
                        g.rows(),
                        g.cols(),
                        bv.rows(),
                        Operand::plain(&g),
                        Operand::transposed(bv),
                        &mut da,
                        false,
                    );
                    accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(
                        av.cols(),
                        av.rows(),
                        g.cols(),
                        Operand::transposed(av),
                        Operand::plain(&g),
                        &mut db,
                        false,
                    );
                    accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    accumulate(adj, *b, g.clone());
                }
                if self.needs(*a) {
                    accumulate(adj, *a, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*row) {
                    let mut dr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (d, v) in dr.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(adj, *row, Matrix::row_vector(dr));
                }
                if self.needs(*a) {
                    accumulate(adj, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(adj, *a, hadamard(&g, bv));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, hadamard(&g, av));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.needs(*col) {
                    let dc: Vec<f64> = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(adj, *col, Matrix::from_raw(g.rows(), 1, dc));
                }
                if self.needs(*a) {
                    let mut da = g;
                    for i in 0..da.rows() {
                        let s = cv.as_slice()[i];
                        da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(adj, *a, da);
                }
            }
            Op::Scale(a, s) => {
                let mut da = g;
                da.scale_in_place(*s);
                accumulate(adj, *a, da);
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let data = g
                    .as_slice()
                    .iter()
                    .zip(av.as_slice())
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(adj, *a, Matrix::from_raw(g.rows(), g.cols(), data));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain).as_slice());
                let (r, c) = xv.shape();
                let mut dgain = vec![0.0; c];
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    let inv = inv_rms[i];
                    let (xr, gr) = (xv.row(i), g.row(i));
                    let mut dot = 0.0;
                    for j in 0..c {
                        let xh = xr[j] * inv;
                        dgain[j] += gr[j] * xh;
                        dot += gr[j] * gv[j] * xh;
                    }
                    let mean_dot = dot / c as f64;
                    let dxr = dx.row_mut(i);
                    for j in 0..c {
                        let xh = xr[j] * inv;
                        dxr[j] = inv * (gr[j] * gv[j] - xh * mean_dot);
                    }
                }
                if self.needs(*gain) {
                    accumulate(adj, *gain, Matrix::row_vector(dgain));
                }
                if self.needs(*x) {
                    accumulate(adj, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                accumulate(adj, *a, da);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(adj, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                dx.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
                accumulate(adj, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let r = g.rows();
                if self.needs(*a) {
                    let mut data = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        data.extend_from_slice(&g.row(i)[..ca]);
                    }
                    accumulate(adj, *a, Matrix::from_raw(r, ca, data));
                }
                if self.needs(*b) {
                    let cb = g.cols() - ca;
                    let mut data = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        data.extend_from_slice(&g.row(i)[ca..]);
                    }
                    accumulate(adj, *b, Matrix::from_raw(r, cb, data));
                }
            }
            Op::Gather { table, ids } => {
                let (n, c) = self.shape(*table);
                let mut dt = Matrix::zeros(n, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(adj, *table, dt);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (l, d) = self.shape(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Matrix::zeros(l, d);
                let mut dk = Matrix::zeros(l, d);
                let mut dv = Matrix::zeros(l, d);
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    let g_h = Operand::block(&g.as_slice()[off..], d, false);
                    // dV_h = Pᵀ·dO_h
                    gemm_raw(
                        l,
                        l,
                        dh,
                        Operand::transposed(p),
                        g_h,
                        &mut dv.as_mut_slice()[off..],
                        d,
                        false,
                    );
                    // dP = dO_h·V_hᵀ
                    let mut dp = Matrix::zeros(l, l);
                    gemm(
                        l,
                        dh,
                        l,
                        g_h,
                        Operand::block(&vv.as_slice()[off..], d, true),
                        &mut dp,
                        false,
                    );
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
                    for i in 0..l {
                        let pr = p.row(i);
                        let dpr = dp.row_mut(i);
                        let dot: f64 = pr[..=i].iter().zip(&dpr[..=i]).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            dpr[j] = if j <= i { pr[j] * (dpr[j] - dot) * scale } else { 0.0 };
                        }
                    }
                    // dQ_h = dS·K_h, dK_h = dSᵀ·Q_h
                    gemm_raw(
                        l,
                        l,
                        dh,
                        Operand::plain(&dp),
                        Operand::block(&kv.as_slice()[off..], d, false),
                        &mut dq.as_mut_slice()[off..],
                        d,
                        false,
                    );
                    gemm_raw(
                        l,
                        l,
                        dh,
                        Operand::transposed(&dp),
                        Operand::block(&qv.as_slice()[off..], d, false),
                        &mut dk.as_mut_slice()[off..],
                        d,
                        false,
                    );
                }
                if self.needs(*q) {
                    accumulate(adj, *q, dq);
                }
                if self.needs(*k) {
                    accumulate(adj, *k, dk);
                }
                if self.needs(*v) {
                    accumulate(adj, *v, dv);
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
                weight,
            } => {
                let s = g.as_slice()[0] * weight;
                let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let mass: f64 = targets.row(i).iter().sum();
                    for ((d, p), t) in dl.row_mut(i).iter_mut().zip(probs.row(i)).zip(targets.row(i)) {
                        *d = s * (p * mass - t);
                    }
                }
                accumulate(adj, *logits, dl);
            }
            Op::HardCrossEntropy {
                logits,
                labels,
                probs,
                weight,
            } => {
                let s = g.as_slice()[0] * weight;
                let mut dl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let v = dl.get(i, y);
                    dl.set(i, y, v - 1.0);
                }
                dl.scale_in_place(s);
                accumulate(adj, *logits, dl);
            }
            Op::SquaredError { x, target, weight } => {
                let s = 2.0 * g.as_slice()[0] * weight;
                let xv = self.value(*x);
                let data = xv
                    .as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(a, b)| s * (a - b))
                    .collect();
                accumulate(adj, *x, Matrix::from_raw(xv.rows(), xv.cols(), data));
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

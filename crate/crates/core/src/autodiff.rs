//! Dense matrices and a reverse-mode tape.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`; vectors are
//! `1 × d`. Operations append nodes to a [`Tape`], so node order is already a
//! topological order and [`Tape::backward`] walks it once in reverse.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
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

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += a · b`
fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let p = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * p..(i + 1) * p];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += g · bᵀ`
fn matmul_nt_into(g: &Tensor, b: &Tensor, out: &mut Tensor) {
    for i in 0..g.rows {
        let gr = g.row(i);
        for k in 0..b.rows {
            out.data[i * out.cols + k] += dot(gr, b.row(k));
        }
    }
}

/// `out += aᵀ · g`
fn matmul_tn_into(a: &Tensor, g: &Tensor, out: &mut Tensor) {
    let p = g.cols;
    for i in 0..a.rows {
        let gr = g.row(i);
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &gv) in out.data[k * p..(k + 1) * p].iter_mut().zip(gr) {
                *o += aik * gv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalized dot product; errors on a zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine similarity operand".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise softmax with max subtraction. Masked columns get probability 0.
pub fn softmax_rows(x: &Tensor, col_mask: Option<&[bool]>) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let keep = |j: usize| col_mask.is_none_or(|m| m[j]);
        let m = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if keep(j) { (*v - m).exp() } else { 0.0 };
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<Option<usize>> },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    ColSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    NormalizeRows { x: Var, norms: Vec<f64> },
    LogRatio { logits: Var, coeffs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation for a single backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let [r, c] = tape.value(v).shape();
            Tensor::zeros(r, c)
        })
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut value = x.clone();
        value.add_assign(y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a[m×d] + b[1×d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows != 1 || x.cols != y.cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", x.shape(), y.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&y.data) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Column-wise max over rows. Ties go to the lowest row index, which also
    /// receives the whole gradient.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows == 0 {
            return Err(Error::EmptyInput("max_rows"));
        }
        let mut argmax = vec![0usize; t.cols];
        let mut value = Tensor::row_vector(t.row(0));
        for i in 1..t.rows {
            for (c, &v) in t.row(i).iter().enumerate() {
                if v > value.data[c] {
                    value.data[c] = v;
                    argmax[c] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxRows { x, argmax }, rg))
    }

    /// One output row per group: column-wise max over the group's rows, or a
    /// zero row for an empty group.
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols;
        let mut value = Tensor::zeros(groups.len(), d);
        let mut argmax = vec![None; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            let Some(&first) = members.first() else { continue };
            if members.iter().any(|&i| i >= t.rows) {
                return Err(Error::shape("segment_max", "row index out of range"));
            }
            let out = &mut value.data[g * d..(g + 1) * d];
            out.copy_from_slice(t.row(first));
            let arg = &mut argmax[g * d..(g + 1) * d];
            arg.iter_mut().for_each(|a| *a = Some(first));
            for &i in &members[1..] {
                for (c, &v) in t.row(i).iter().enumerate() {
                    if v > out[c] || (v == out[c] && i < arg[c].unwrap_or(usize::MAX)) {
                        out[c] = v;
                        arg[c] = Some(i);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SegmentMax { x, argmax }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x), None);
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Softmax over columns with `col_mask[j] == false` columns excluded.
    pub fn masked_softmax(&mut self, x: Var, col_mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if col_mask.len() != t.cols {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for {} columns", col_mask.len(), t.cols),
            ));
        }
        if !col_mask.iter().any(|&m| m) {
            return Err(Error::AllKeysMasked);
        }
        let value = softmax_rows(t, Some(col_mask));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let d = t.cols;
        if g.shape() != [1, d] || b.shape() != [1, d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", t.shape(), g.shape(), b.shape()),
            ));
        }
        let mut xhat = Tensor::zeros(t.rows, d);
        let mut inv_std = Vec::with_capacity(t.rows);
        let mut value = Tensor::zeros(t.rows, d);
        for i in 0..t.rows {
            let row = t.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mu) * inv;
                xhat.data[i * d + c] = h;
                value.data[i * d + c] = h * g.data[c] + b.data[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        if start + width > t.cols {
            return Err(Error::shape(
                "col_slice",
                format!("{start}+{width} > {}", t.cols),
            ));
        }
        let mut value = Tensor::zeros(t.rows, width);
        for i in 0..t.rows {
            value.row_mut(i).copy_from_slice(&t.row(i)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ColSlice { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows)
            .ok_or(Error::EmptyInput("concat_cols"))?;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                value.data[i * cols + off..i * cols + off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut value = t.clone();
        let mut norms = Vec::with_capacity(t.rows);
        for i in 0..t.rows {
            let n = l2_norm(t.row(i));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroVector(format!("row {i} of normalize_rows")));
            }
            value.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Contrastive log-ratio `-log(Σ w·e^x / Σ e^x)` over the entries of the
    /// masked rows of `logits`.
    ///
    /// With `pooled` the sums run over all kept rows at once (one ratio);
    /// otherwise each kept row is its own ratio and the result is their mean.
    /// Returns a `1×1` value.
    pub fn log_ratio(
        &mut self,
        logits: Var,
        weights: &Tensor,
        row_mask: &[bool],
        pooled: bool,
    ) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != weights.shape() || row_mask.len() != x.rows {
            return Err(Error::shape(
                "log_ratio",
                format!(
                    "logits {:?}, weights {:?}, mask {}",
                    x.shape(),
                    weights.shape(),
                    row_mask.len()
                ),
            ));
        }
        let kept: Vec<usize> = (0..x.rows).filter(|&i| row_mask[i]).collect();
        if kept.is_empty() {
            return Err(Error::AllBlocksInvalid);
        }
        let groups: Vec<Vec<usize>> = if pooled {
            vec![kept]
        } else {
            kept.into_iter().map(|i| vec![i]).collect()
        };
        let scale = 1.0 / groups.len() as f64;
        let mut loss = 0.0;
        // d loss / d logits, frozen at forward time
        let mut coeffs = Tensor::zeros(x.rows, x.cols);
        for rows in &groups {
            let m = rows
                .iter()
                .flat_map(|&i| x.row(i).iter().copied())
                .fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0, 0.0);
            for &i in rows {
                for (c, &v) in x.row(i).iter().enumerate() {
                    let e = (v - m).exp();
                    den += e;
                    num += weights.get(i, c) * e;
                }
            }
            loss += scale * -(num.ln() - den.ln());
            for &i in rows {
                for (c, &v) in x.row(i).iter().enumerate() {
                    let e = (v - m).exp();
                    coeffs.data[i * x.cols + c] =
                        scale * (e / den - weights.get(i, c) * e / num);
                }
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::row_vector(&[loss]),
            Op::LogRatio { logits, coeffs },
            rg,
        ))
    }

    /// Reverse pass from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for node {:?}", g.shape(), self.value(*v).shape()),
                ));
            }
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, out: Var) -> Result<Gradients> {
        self.backward(&[(out, Tensor::row_vector(&[1.0]))])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let slot = zeros_slot(&mut grads[a.0], av);
                    matmul_nt_into(g, bv, slot);
                }
                if self.wants(*b) {
                    let slot = zeros_slot(&mut grads[b.0], bv);
                    matmul_tn_into(av, g, slot);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let mut s = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (acc, v) in s.data.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads[b.0], &s);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    d.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (dv, &y) in d.data.iter_mut().zip(&node.value.data) {
                        if y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &g.transpose());
                }
            }
            Op::MaxRows { x, argmax } => {
                if self.wants(*x) {
                    let slot = zeros_slot(&mut grads[x.0], self.value(*x));
                    let cols = slot.cols;
                    for (c, &r) in argmax.iter().enumerate() {
                        slot.data[r * cols + c] += g.data[c];
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if self.wants(*x) {
                    let slot = zeros_slot(&mut grads[x.0], self.value(*x));
                    let cols = slot.cols;
                    for (flat, r) in argmax.iter().enumerate() {
                        if let Some(r) = r {
                            slot.data[r * cols + flat % cols] += g.data[flat];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let s = dot(g.row(i), y.row(i));
                        for c in 0..y.cols {
                            d.data[i * y.cols + c] = y.get(i, c) * (g.get(i, c) - s);
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols;
                let gv = self.value(*gain);
                if self.wants(*gain) {
                    let mut dg = Tensor::zeros(1, d);
                    for i in 0..xhat.rows {
                        for c in 0..d {
                            dg.data[c] += g.get(i, c) * xhat.get(i, c);
                        }
                    }
                    accumulate(&mut grads[gain.0], &dg);
                }
                if self.wants(*bias) {
                    let mut db = Tensor::zeros(1, d);
                    for i in 0..g.rows {
                        for (acc, v) in db.data.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xhat.rows, d);
                    for i in 0..xhat.rows {
                        let dxhat: Vec<f64> = (0..d).map(|c| g.get(i, c) * gv.data[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx.data[i * d + c] =
                                inv_std[i] * (dxhat[c] - mean_d - xhat.get(i, c) * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::ColSlice { x, start } => {
                if self.wants(*x) {
                    let slot = zeros_slot(&mut grads[x.0], self.value(*x));
                    let cols = slot.cols;
                    for i in 0..g.rows {
                        for (c, v) in g.row(i).iter().enumerate() {
                            slot.data[i * cols + start + c] += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.wants(*p) {
                        let slot = zeros_slot(&mut grads[p.0], self.value(*p));
                        for i in 0..g.rows {
                            for c in 0..w {
                                slot.data[i * w + c] += g.get(i, off + c);
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let s = dot(g.row(i), y.row(i));
                        for c in 0..y.cols {
                            d.data[i * y.cols + c] = (g.get(i, c) - y.get(i, c) * s) / norms[i];
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::LogRatio { logits, coeffs } => {
                if self.wants(*logits) {
                    let mut d = coeffs.clone();
                    let s = g.scalar();
                    d.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads[logits.0], &d);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn zeros_slot<'a>(slot: &'a mut Option<Tensor>, like: &Tensor) -> &'a mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}

/// Weights of one multi-head attention block (`d × d` each, no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

/// Scaled dot-product attention over `heads` column groups followed by the
/// output projection. `key_mask[j] == false` removes key `j`.
pub fn multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights<Var>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.value(q).cols;
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("multihead_attention", format!("d={d}, heads={heads}")));
    }
    let tk = tape.value(k).rows;
    if tape.value(k).cols != d || tape.value(v).cols != d || tape.value(v).rows != tk {
        return Err(Error::shape(
            "multihead_attention",
            format!(
                "q {:?}, k {:?}, v {:?}",
                tape.value(q).shape(),
                tape.value(k).shape(),
                tape.value(v).shape()
            ),
        ));
    }
    if let Some(m) = key_mask {
        if m.len() != tk {
            return Err(Error::shape("multihead_attention", "mask length"));
        }
    }
    let head_dim = d / heads;
    let qp = tape.matmul(q, w.wq)?;
    let kp = tape.matmul(k, w.wk)?;
    let vp = tape.matmul(v, w.wv)?;
    let all = vec![true; tk];
    let mask = key_mask.unwrap_or(&all);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.col_slice(qp, h * head_dim, head_dim)?;
        let kh = tape.col_slice(kp, h * head_dim, head_dim)?;
        let vh = tape.col_slice(vp, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = tape.masked_softmax(scores, mask)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, w.wo)
}

/// Central-difference gradient checking.
pub mod gradcheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    /// `(f(x + h) - f(x - h)) / 2h` for coordinate `i` of `x`.
    pub fn central_difference(
        f: &mut impl FnMut(&[f64]) -> f64,
        x: &mut [f64],
        i: usize,
        h: f64,
    ) -> f64 {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        (fp - fm) / (2.0 * h)
    }
}

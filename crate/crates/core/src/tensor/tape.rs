use std::collections::BTreeMap;

use super::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::{Gradients, ParamId, ParamStore};
use super::rng::Rng;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Dropout(Var, Vec<T>),
    Transpose(Var),
    L2Normalize(Var, Vec<T>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation for a single reverse pass.
///
/// Every matmul-class op adds its scalar multiply-add count to
/// [`Tape::macs`]; nothing else is counted.
pub struct Tape<'s, T: Scalar> {
    nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: BTreeMap<ParamId, Var>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: BTreeMap::new(),
            macs: 0,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records (once per tape) the parameter `id` from the attached store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("tape has no parameter store attached");
        let v = self.push(store.tensor(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.cols(x);
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_rows_masked(x, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Row softmax where `mask[j] == false` hides column `j` (as a -inf logit).
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape("softmax mask", xv.shape(), &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Contract("every attention key is masked".into()));
            }
        }
        let mut out = vec![T::zero(); xv.numel()];
        for (row, o) in xv.data().chunks(cols.max(1)).zip(out.chunks_mut(cols.max(1))) {
            kernels::softmax_row(row, mask, o);
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Layer norm over the last axis (epsilon 1e-5) followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let nf = T::of(n as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.cols(first);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, _) = self.mat_dims(x, "slice_rows")?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let t = self.value(x).slice_rows(start, len);
        Ok(self.push(t, Op::SliceRows(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.rows(first);
        let mut total = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.rows(p) != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.cols(p);
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(&[rows, len], data)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    /// Gathers rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(table, "gather_rows")?;
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(t, Op::Gather(table, ids.to_vec())))
    }

    /// Inverted dropout. Identity (same node) when `p == 0` or `train` is false.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 || !train {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let factors: Vec<T> = (0..xv.numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::Dropout(x, factors)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "transpose")?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let t = Tensor::new(&[c, r], data)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "l2_normalize_rows")?;
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let n = row
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::of(NORM_EPS));
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::L2Normalize(x, norms)))
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    /// With no targets the loss is defined as 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        let mut count = 0;
        for r in 0..rows {
            let out = &mut probs[r * cols..(r + 1) * cols];
            kernels::softmax_row(lv.row(r), None, out);
            if let Some(t) = targets[r] {
                if t >= cols {
                    return Err(Error::Vocabulary { id: t, size: cols });
                }
                let row = lv.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                total = total + (lse - row[t]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.backward_all(loss)?;
        let mut out = Gradients::default();
        for (&id, &v) in &self.param_vars {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.value(v).numel()]);
            let frozen = self.store.is_some_and(|s| s.is_frozen(id));
            out.insert(id, Tensor::new(self.shape(v), g)?, frozen);
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to an arbitrary recorded node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor<T>> {
        let grads = self.backward_all(loss)?;
        let g = grads[wrt.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.value(wrt).numel()]);
        Tensor::new(self.shape(wrt), g)
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let numel = |v: Var| self.value(v).numel();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel(v)]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|ga| matmul_nt_acc(g, bv, ga, m, n, k));
                acc(*b, &|gb| matmul_tn_acc(av, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|ga| matmul_acc(g, bv, ga, m, n, k));
                acc(*b, &|gb| matmul_tn_acc(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &|ga| add_into(ga, g));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &|gx| add_into(gx, g));
                let cols = out.cols().max(1);
                acc(*bias, &|gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &|gx| {
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o = *o + gv * *f;
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gv * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols().max(1);
                let y = out.data();
                acc(*x, &|gx| {
                    for ((gr, yr), or) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols().max(1);
                let gm = self.value(*gamma).data();
                acc(*gamma, &|gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &gv), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gv * h;
                        }
                    }
                });
                acc(*beta, &|gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &|gx| {
                    let nf = T::of(n as f64);
                    for (r, ((gr, hr), or)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let k = rstd[r] / nf;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            or[j] = or[j] + k * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(p);
                    acc(p, &|gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let cols = out.cols();
                let off = start * cols;
                acc(*x, &|gx| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    acc(p, &|gp| {
                        for (r, row) in gp.chunks_mut(c).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let len = out.cols();
                let cols = self.cols(*x);
                acc(*x, &|gx| {
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], gr);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let cols = out.cols();
                acc(*table, &|gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Dropout(x, factors) => acc(*x, &|gx| {
                for ((o, &gv), &f) in gx.iter_mut().zip(g).zip(factors) {
                    *o = *o + gv * f;
                }
            }),
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                let gt = kernels::transpose(g, r, c);
                acc(*x, &|gx| add_into(gx, &gt));
            }
            Op::L2Normalize(x, norms) => {
                let cols = out.cols().max(1);
                let y = out.data();
                acc(*x, &|gx| {
                    for (r, ((gr, yr), or)) in g
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = *o + (gv - yv * dot) / norms[r];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let cols = self.cols(*logits);
                let scale = g[0] / T::of(*count as f64);
                acc(*logits, &|gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        for (j, o) in row.iter_mut().enumerate() {
                            let mut d = probs[r * cols + j];
                            if j == t {
                                d = d - T::one();
                            }
                            *o = *o + d * scale;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|gx| {
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

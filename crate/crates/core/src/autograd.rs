//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every parameter leaf that was read through
//! [`Tape::param`].

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    Im2Col { x: Var, kernel: usize, pad_left: usize },
    OverlapAdd { x: Var, stride: usize, kernel: usize, crop_front: usize },
    Embed { table: Var, ids: Vec<usize> },
    AdditiveScores { q: Var, k: Var, w: Var },
    MeanAbsErr { x: Var, target: Matrix },
    MaskedMse { x: Var, target: Matrix, mask: Vec<bool> },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-parameter gradients, indexed like the [`ParamStore`] they came from.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of `shape` when the parameter was unused.
    pub fn get_or_zeros(&self, id: ParamId, shape: (usize, usize)) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Matrix::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn set(&mut self, id: ParamId, g: Matrix) {
        if self.grads.len() <= id.index() {
            self.grads.resize(id.index() + 1, None);
        }
        self.grads[id.index()] = Some(g);
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated reads of one id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    /// `a + 1ᵀ·row`, broadcasting a `1 × C` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} bias");
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (dropout masks, segment masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row normalization with learned `1 × C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut xhat = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = xhat.clone();
        for i in 0..r {
            for ((o, gj), bj) in value.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gj + bj;
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var], cols: usize) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats, cols);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let value = self.value(a).repeat_rows(n);
        self.push(value, Op::RepeatRows(a, n))
    }

    /// Unfolds a `T × C` sequence into `T × (kernel·C)` windows; row `t`
    /// holds input rows `t - pad_left .. t - pad_left + kernel`, zero outside.
    pub fn im2col(&mut self, x: Var, kernel: usize, pad_left: usize) -> Var {
        let xv = self.value(x);
        let (t_len, c) = xv.shape();
        let mut value = Matrix::zeros(t_len, kernel * c);
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t as isize - pad_left as isize + j as isize;
                if src >= 0 && (src as usize) < t_len {
                    value.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push(value, Op::Im2Col { x, kernel, pad_left })
    }

    /// Folds `T_in × (kernel·C)` per-step contributions into a sequence of
    /// `out_len` rows: block `j` of input row `t` lands on output row
    /// `t·stride + j - crop_front`; rows outside `[0, out_len)` are dropped.
    pub fn overlap_add(&mut self, x: Var, stride: usize, kernel: usize, crop_front: usize, out_len: usize) -> Var {
        let xv = self.value(x);
        let (t_in, kc) = xv.shape();
        assert_eq!(kc % kernel, 0, "overlap_add width {kc} not divisible by kernel {kernel}");
        let c = kc / kernel;
        let mut value = Matrix::zeros(out_len, c);
        for t in 0..t_in {
            for j in 0..kernel {
                let dst = (t * stride + j) as isize - crop_front as isize;
                if dst >= 0 && (dst as usize) < out_len {
                    let src = &xv.row(t)[j * c..(j + 1) * c];
                    for (o, s) in value.row_mut(dst as usize).iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        self.push(value, Op::OverlapAdd { x, stride, kernel, crop_front })
    }

    /// Row lookup into an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(value, Op::Embed { table, ids: ids.to_vec() })
    }

    /// `s[i, j] = Σ_d w[d] · tanh(q[i, d] + k[j, d])` for `q: T_q × D`,
    /// `k: T_k × D`, `w: 1 × D`.
    pub fn additive_scores(&mut self, q: Var, k: Var, w: Var) -> Var {
        let (qv, kv, wv) = (self.value(q), self.value(k), self.value(w));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "additive_scores key width");
        assert_eq!(wv.shape(), (1, d), "additive_scores weight shape");
        let mut value = Matrix::zeros(qv.rows(), kv.rows());
        let wd = wv.data();
        for i in 0..qv.rows() {
            let qi = qv.row(i);
            for j in 0..kv.rows() {
                let kj = kv.row(j);
                let mut s = 0.0;
                for dd in 0..d {
                    s += wd[dd] * (qi[dd] + kj[dd]).tanh();
                }
                value[(i, j)] = s;
            }
        }
        self.push(value, Op::AdditiveScores { q, k, w })
    }

    /// Mean absolute error against a constant target, as a `1 × 1` node.
    pub fn mean_abs_err(&mut self, x: Var, target: &Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mean_abs_err shape mismatch");
        let n = xv.len().max(1) as f64;
        let s: f64 = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        self.push(Matrix::scalar(s / n), Op::MeanAbsErr { x, target: target.clone() })
    }

    /// Mean squared error over rows where `mask` is set, for a `T × 1`
    /// column. An all-false mask gives zero.
    pub fn masked_mse(&mut self, x: Var, target: &Matrix, mask: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "masked_mse shape mismatch");
        assert_eq!(xv.cols(), 1, "masked_mse expects a column");
        assert_eq!(mask.len(), xv.rows(), "masked_mse mask length");
        let count = mask.iter().filter(|&&m| m).count();
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b) * (a - b))
            .sum();
        let value = if count == 0 { 0.0 } else { s / count as f64 };
        self.push(Matrix::scalar(value), Op::MaskedMse { x, target: target.clone(), mask: mask.to_vec() })
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, n_params: usize) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::empty(n_params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut out.grads[id.index()], g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[row.0], g.col_sums());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads[a.0], g.zip_map(c, |x, y| x * y)),
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gy, x| if x > 0.0 { gy } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gy), yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma).data();
                    let (r, c) = xhat.shape();
                    let mut gx = Matrix::zeros(r, c);
                    let mut ggamma = Matrix::zeros(1, c);
                    let mut gbeta = Matrix::zeros(1, c);
                    for i in 0..r {
                        let gy = g.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                            ggamma.data_mut()[j] += gy[j] * xh[j];
                            gbeta.data_mut()[j] += gy[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let row = gx.row_mut(i);
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            row[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let n = g.rows();
                    ga.data_mut()[start * c..(start + n) * c].copy_from_slice(g.data());
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let w = g.cols();
                    for i in 0..r {
                        ga.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        accumulate(&mut grads[p.0], g.slice_rows(r0, r0 + n));
                        r0 += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut grads[p.0], g.slice_cols(c0, c0 + w));
                        c0 += w;
                    }
                }
                Op::RepeatRows(a, n) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for k in 0..*n {
                            for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(i * n + k)) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Im2Col { x, kernel, pad_left } => {
                    let (t_len, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(t_len, c);
                    for t in 0..t_len {
                        for j in 0..*kernel {
                            let src = t as isize - *pad_left as isize + j as isize;
                            if src >= 0 && (src as usize) < t_len {
                                let block = &g.row(t)[j * c..(j + 1) * c];
                                for (o, v) in gx.row_mut(src as usize).iter_mut().zip(block) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::OverlapAdd { x, stride, kernel, crop_front } => {
                    let (t_in, kc) = self.shape(*x);
                    let c = kc / kernel;
                    let out_len = g.rows();
                    let mut gx = Matrix::zeros(t_in, kc);
                    for t in 0..t_in {
                        for j in 0..*kernel {
                            let dst = (t * stride + j) as isize - *crop_front as isize;
                            if dst >= 0 && (dst as usize) < out_len {
                                gx.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(g.row(dst as usize));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Embed { table, ids } => {
                    let (r, c) = self.shape(*table);
                    let mut gt = Matrix::zeros(r, c);
                    for (row, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::AdditiveScores { q, k, w } => {
                    let (qv, kv, wv) = (self.value(*q), self.value(*k), self.value(*w));
                    let d = qv.cols();
                    let wd = wv.data();
                    let mut gq = Matrix::zeros(qv.rows(), d);
                    let mut gk = Matrix::zeros(kv.rows(), d);
                    let mut gw = Matrix::zeros(1, d);
                    for i in 0..qv.rows() {
                        for j in 0..kv.rows() {
                            let gs = g[(i, j)];
                            if gs == 0.0 {
                                continue;
                            }
                            for dd in 0..d {
                                let th = (qv[(i, dd)] + kv[(j, dd)]).tanh();
                                let inner = gs * wd[dd] * (1.0 - th * th);
                                gq[(i, dd)] += inner;
                                gk[(j, dd)] += inner;
                                gw.data_mut()[dd] += gs * th;
                            }
                        }
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::MeanAbsErr { x, target } => {
                    let xv = self.value(*x);
                    let s = g.item() / xv.len().max(1) as f64;
                    let gx = xv.zip_map(target, |a, b| {
                        let d = a - b;
                        if d > 0.0 {
                            s
                        } else if d < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaskedMse { x, target, mask } => {
                    let xv = self.value(*x);
                    let count = mask.iter().filter(|&&m| m).count();
                    let mut gx = Matrix::zeros(xv.rows(), 1);
                    if count > 0 {
                        let s = 2.0 * g.item() / count as f64;
                        for (i, &m) in mask.iter().enumerate() {
                            if m {
                                gx.data_mut()[i] = s * (xv.data()[i] - target.data()[i]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        out
    }
}

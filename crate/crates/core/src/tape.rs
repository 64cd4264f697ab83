//! Reverse-mode autodiff over dense matrices.
//!
//! A [`Tape`] is an eagerly-evaluated expression graph: every op computes
//! its value at build time and records enough to replay the chain rule
//! backwards. The op set is exactly what the pipeline needs — linear
//! algebra, row softmax with a structural mask, layer normalization, the
//! origin exp/log maps, and pairwise geodesic distances — so gradients of
//! any scalar loss reach every registered leaf in one `backward` pass.
//!
//! Nodes are evaluated and differentiated in creation order, single
//! threaded, so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{dot, norm, Matrix};
use crate::poincare;

/// Variance epsilon used by all layer normalization in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a tape node. Carries its shape for cheap assertions.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    /// Matrix times a 1x1 scalar node.
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// (n x d) + (1 x d), broadcast over rows.
    AddRowBroadcast(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Zero-pad or truncate columns to a new width.
    PadCols(Var),
    Reshape(Var),
    MeanRows(Var),
    SumAll(Var),
    Relu(Var),
    Gelu(Var),
    /// x, gain (1 x d), bias (1 x d); per-row mean/variance, eps = LN_EPS.
    LayerNormRows(Var, Var, Var),
    /// Row softmax; `None` mask means fully allowed. Blocked entries are
    /// exactly zero in the output.
    SoftmaxRows(Var, Option<Vec<bool>>),
    /// Summed autoregressive NLL of `targets` under row-wise softmax.
    CrossEntropyRows(Var, Vec<usize>),
    /// Row-wise origin exponential map with ball clamp.
    ExpMapRows(Var),
    /// Row-wise origin logarithmic map.
    LogMapRows(Var),
    /// (n x d, m x d) -> n x m geodesic distances.
    PairwiseGeodesic(Var, Var),
    /// Fixed-weight contraction to a scalar: sum_ij w_ij * x_ij.
    DotConst(Var, Matrix),
}

struct TapeNode {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.idx].as_ref()
    }
}

/// Eager reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.idx].value
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        let (rows, cols) = (value.rows(), value.cols());
        self.nodes.push(TapeNode {
            op,
            value,
            needs_grad,
        });
        Var { idx, rows, cols }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Frozen leaf: participates in the forward pass only.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, needs)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul_elem shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(a.rows, a.cols, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MulElem(a, b), value, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), value, needs)
    }

    pub fn mul_scalar(&mut self, m: Var, s: Var) -> Var {
        assert_eq!((s.rows, s.cols), (1, 1), "mul_scalar needs a 1x1 scalar");
        let sv = self.value(s).scalar();
        let value = self.value(m).scale(sv);
        let needs = self.needs(m) || self.needs(s);
        self.push(Op::MulScalar(m, s), value, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), value, needs)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1, "broadcast row must be 1 x d");
        assert_eq!(a.cols, row.cols, "broadcast width mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::AddRowBroadcast(a, row), value, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = parts[0].cols;
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(self.value(*p).data());
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatRows(parts.to_vec()), Matrix::from_vec(rows, cols, data), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                let src = self.value(*p).row(r).to_vec();
                value.row_mut(r)[off..off + p.cols].copy_from_slice(&src);
            }
            off += p.cols;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatCols(parts.to_vec()), value, needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.rows, "slice_rows out of range");
        let src = self.value(a);
        let mut data = Vec::with_capacity(len * a.cols);
        for r in start..start + len {
            data.extend_from_slice(src.row(r));
        }
        let needs = self.needs(a);
        self.push(Op::SliceRows(a, start), Matrix::from_vec(len, a.cols, data), needs)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * a.cols);
        for &i in indices {
            assert!(i < a.rows, "gather_rows index out of range");
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::from_vec(indices.len(), a.cols, data);
        let needs = self.needs(a);
        self.push(Op::GatherRows(a, indices.to_vec()), value, needs)
    }

    pub fn pad_cols(&mut self, a: Var, new_cols: usize) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(a.rows, new_cols);
        let keep = a.cols.min(new_cols);
        for r in 0..a.rows {
            let row = src.row(r)[..keep].to_vec();
            value.row_mut(r)[..keep].copy_from_slice(&row);
        }
        let needs = self.needs(a);
        self.push(Op::PadCols(a), value, needs)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(a.rows * a.cols, rows * cols, "reshape element count mismatch");
        let value = Matrix::from_vec(rows, cols, self.value(a).data().to_vec());
        let needs = self.needs(a);
        self.push(Op::Reshape(a), value, needs)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        assert!(a.rows > 0, "mean_rows over zero rows");
        let src = self.value(a);
        let mut out = vec![0.0; a.cols];
        for r in 0..a.rows {
            for (o, v) in out.iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / a.rows as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        let needs = self.needs(a);
        self.push(Op::MeanRows(a), Matrix::from_vec(1, a.cols, out), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Matrix::from_vec(1, 1, vec![s]), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(Op::Relu(a), Matrix::from_vec(a.rows, a.cols, data), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Gelu(a), Matrix::from_vec(a.rows, a.cols, data), needs)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        assert_eq!(gain.rows, 1);
        assert_eq!(bias.rows, 1);
        assert_eq!(gain.cols, x.cols, "layer_norm gain width mismatch");
        assert_eq!(bias.cols, x.cols, "layer_norm bias width mismatch");
        let src = self.value(x);
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut value = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = src.row(r);
            let (mean, inv_std) = row_moments(row);
            for c in 0..x.cols {
                value.set(r, c, (row[c] - mean) * inv_std * g[c] + b[c]);
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNormRows(x, gain, bias), value, needs)
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        if let Some(m) = mask {
            assert_eq!(m.len(), a.rows * a.cols, "softmax mask size mismatch");
        }
        let value = masked_softmax(self.value(a), mask);
        let needs = self.needs(a);
        self.push(
            Op::SoftmaxRows(a, mask.map(|m| m.to_vec())),
            value,
            needs,
        )
    }

    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        assert_eq!(logits.rows, targets.len(), "one logit row per target");
        let src = self.value(logits);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < logits.cols, "target id out of vocabulary");
            let row = src.row(r);
            loss += log_sum_exp(row) - row[t];
        }
        let needs = self.needs(logits);
        self.push(
            Op::CrossEntropyRows(logits, targets.to_vec()),
            Matrix::from_vec(1, 1, vec![loss]),
            needs,
        )
    }

    pub fn exp_map_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            let row = src.row(r).to_vec();
            poincare::exp_map_into(&row, value.row_mut(r));
        }
        let needs = self.needs(a);
        self.push(Op::ExpMapRows(a), value, needs)
    }

    pub fn log_map_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            let row = src.row(r).to_vec();
            poincare::log_map_into(&row, value.row_mut(r));
        }
        let needs = self.needs(a);
        self.push(Op::LogMapRows(a), value, needs)
    }

    pub fn pairwise_geodesic(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.cols, "pairwise_geodesic dimension mismatch");
        let (pa, pb) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            for j in 0..b.rows {
                value.set(i, j, poincare::dist_slices(pa.row(i), pb.row(j)));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::PairwiseGeodesic(a, b), value, needs)
    }

    pub fn dot_const(&mut self, a: Var, weights: Matrix) -> Var {
        assert_eq!(
            (a.rows, a.cols),
            (weights.rows(), weights.cols()),
            "dot_const shape mismatch"
        );
        let s = dot(self.value(a).data(), weights.data());
        let needs = self.needs(a);
        self.push(Op::DotConst(a, weights), Matrix::from_vec(1, 1, vec![s]), needs)
    }

    /// Backpropagates from a 1x1 root to every leaf that needs gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!((root.rows, root.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut Vec<Option<Matrix>>) {
        let accum = |grads: &mut Vec<Option<Matrix>>, v: Var, delta: Matrix| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.idx] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.scale(-1.0));
            }
            Op::MulElem(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                );
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Scale(a, s) => accum(grads, *a, g.scale(*s)),
            Op::MulScalar(m, s) => {
                let sv = self.value(*s).scalar();
                accum(grads, *m, g.scale(sv));
                let ds = dot(g.data(), self.value(*m).data());
                accum(grads, *s, Matrix::from_vec(1, 1, vec![ds]));
            }
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose());
                let db = self.value(*a).transpose().matmul(g);
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Transpose(a) => accum(grads, *a, g.transpose()),
            Op::AddRowBroadcast(a, row) => {
                accum(grads, *a, g.clone());
                let mut dr = Matrix::zeros(1, row.cols);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dr.set(0, c, dr.get(0, c) + g.get(r, c));
                    }
                }
                accum(grads, *row, dr);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let mut dp = Matrix::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let src = g.row(start + r).to_vec();
                        dp.row_mut(r).copy_from_slice(&src);
                    }
                    accum(grads, *p, dp);
                    start += p.rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let mut dp = Matrix::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let src = g.row(r)[off..off + p.cols].to_vec();
                        dp.row_mut(r).copy_from_slice(&src);
                    }
                    accum(grads, *p, dp);
                    off += p.cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut da = Matrix::zeros(a.rows, a.cols);
                for r in 0..g.rows() {
                    let src = g.row(r).to_vec();
                    da.row_mut(start + r).copy_from_slice(&src);
                }
                accum(grads, *a, da);
            }
            Op::GatherRows(a, indices) => {
                let mut da = Matrix::zeros(a.rows, a.cols);
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..a.cols {
                        da.set(i, c, da.get(i, c) + g.get(r, c));
                    }
                }
                accum(grads, *a, da);
            }
            Op::PadCols(a) => {
                let keep = a.cols.min(g.cols());
                let mut da = Matrix::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let src = g.row(r)[..keep].to_vec();
                    da.row_mut(r)[..keep].copy_from_slice(&src);
                }
                accum(grads, *a, da);
            }
            Op::Reshape(a) => {
                accum(
                    grads,
                    *a,
                    Matrix::from_vec(a.rows, a.cols, g.data().to_vec()),
                );
            }
            Op::MeanRows(a) => {
                let inv = 1.0 / a.rows as f64;
                let mut da = Matrix::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    for c in 0..a.cols {
                        da.set(r, c, g.get(0, c) * inv);
                    }
                }
                accum(grads, *a, da);
            }
            Op::SumAll(a) => {
                let s = g.scalar();
                accum(
                    grads,
                    *a,
                    Matrix::from_vec(a.rows, a.cols, vec![s; a.rows * a.cols]),
                );
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gd, &x)| if x > 0.0 { gd } else { 0.0 })
                    .collect();
                accum(grads, *a, Matrix::from_vec(a.rows, a.cols, data));
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gd, &x)| gd * gelu_deriv(x))
                    .collect();
                accum(grads, *a, Matrix::from_vec(a.rows, a.cols, data));
            }
            Op::LayerNormRows(x, gain, bias) => {
                let src = self.value(*x);
                let gn = self.value(*gain).row(0).to_vec();
                let d = x.cols as f64;
                let mut dx = Matrix::zeros(x.rows, x.cols);
                let mut dgain = Matrix::zeros(1, x.cols);
                let mut dbias = Matrix::zeros(1, x.cols);
                for r in 0..x.rows {
                    let row = src.row(r);
                    let (mean, inv_std) = row_moments(row);
                    // h = gain .* dy; dx = (h - mean(h) - xhat * mean(h .* xhat)) * inv_std
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for c in 0..x.cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let h = gn[c] * g.get(r, c);
                        mean_h += h;
                        mean_hx += h * xhat;
                        dgain.set(0, c, dgain.get(0, c) + g.get(r, c) * xhat);
                        dbias.set(0, c, dbias.get(0, c) + g.get(r, c));
                    }
                    mean_h /= d;
                    mean_hx /= d;
                    for c in 0..x.cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let h = gn[c] * g.get(r, c);
                        dx.set(r, c, (h - mean_h - xhat * mean_hx) * inv_std);
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gain, dgain);
                accum(grads, *bias, dbias);
            }
            Op::SoftmaxRows(a, mask) => {
                let w = &self.nodes[idx].value;
                let mut da = Matrix::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let mut s = 0.0;
                    for c in 0..a.cols {
                        s += w.get(r, c) * g.get(r, c);
                    }
                    for c in 0..a.cols {
                        let allowed = mask
                            .as_ref()
                            .map_or(true, |m| m[r * a.cols + c]);
                        if allowed {
                            da.set(r, c, w.get(r, c) * (g.get(r, c) - s));
                        }
                    }
                }
                accum(grads, *a, da);
            }
            Op::CrossEntropyRows(logits, targets) => {
                let s = g.scalar();
                let src = self.value(*logits);
                let mut dl = Matrix::zeros(logits.rows, logits.cols);
                for (r, &t) in targets.iter().enumerate() {
                    let row = src.row(r);
                    let lse = log_sum_exp(row);
                    for c in 0..logits.cols {
                        let p = libm::exp(row[c] - lse);
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dl.set(r, c, s * (p - onehot));
                    }
                }
                accum(grads, *logits, dl);
            }
            Op::ExpMapRows(a) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let v = src.row(r);
                    let gr = g.row(r);
                    let radius = norm(v);
                    let out = da.row_mut(r);
                    if radius < poincare::NORM_EPS {
                        out.copy_from_slice(gr);
                    } else if libm::tanh(radius) >= poincare::MAX_NORM {
                        // Clamped branch: y = MAX_NORM * v / |v|.
                        let gv = dot(gr, v) / (radius * radius);
                        let k = poincare::MAX_NORM / radius;
                        for c in 0..a.cols {
                            out[c] = k * (gr[c] - gv * v[c]);
                        }
                    } else {
                        let s = poincare::exp_scale(radius);
                        let coef = poincare::exp_scale_deriv(radius) / radius * dot(gr, v);
                        for c in 0..a.cols {
                            out[c] = s * gr[c] + coef * v[c];
                        }
                    }
                }
                accum(grads, *a, da);
            }
            Op::LogMapRows(a) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let p = src.row(r);
                    let gr = g.row(r);
                    let n = norm(p);
                    let out = da.row_mut(r);
                    if n < poincare::NORM_EPS {
                        out.copy_from_slice(gr);
                    } else {
                        let t = poincare::log_scale(n);
                        let coef = poincare::log_scale_deriv(n) / n * dot(gr, p);
                        for c in 0..a.cols {
                            out[c] = t * gr[c] + coef * p[c];
                        }
                    }
                }
                accum(grads, *a, da);
            }
            Op::PairwiseGeodesic(a, b) => {
                let (pa, pb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(a.rows, a.cols);
                let mut db = Matrix::zeros(b.rows, b.cols);
                for i in 0..a.rows {
                    for j in 0..b.rows {
                        let gd = g.get(i, j);
                        if gd == 0.0 {
                            continue;
                        }
                        let (ra, rb) = (pa.row(i), pb.row(j));
                        let mut diff_sq = 0.0;
                        let mut a_sq = 0.0;
                        let mut b_sq = 0.0;
                        for (&x, &y) in ra.iter().zip(rb) {
                            let d = x - y;
                            diff_sq += d * d;
                            a_sq += x * x;
                            b_sq += y * y;
                        }
                        let bb = 1.0 - a_sq;
                        let cc = 1.0 - b_sq;
                        let u = 1.0 + 2.0 * diff_sq / (bb * cc);
                        let disc = u * u - 1.0;
                        if disc < 1e-24 {
                            // Coincident points: distance has no gradient here.
                            continue;
                        }
                        let du = gd / libm::sqrt(disc);
                        for c in 0..a.cols {
                            let diff = ra[c] - rb[c];
                            da.set(
                                i,
                                c,
                                da.get(i, c)
                                    + du * (4.0 * diff / (bb * cc)
                                        + 4.0 * diff_sq * ra[c] / (bb * bb * cc)),
                            );
                            db.set(
                                j,
                                c,
                                db.get(j, c)
                                    + du * (-4.0 * diff / (bb * cc)
                                        + 4.0 * diff_sq * rb[c] / (bb * cc * cc)),
                            );
                        }
                    }
                }
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::DotConst(a, w) => {
                let s = g.scalar();
                accum(grads, *a, w.scale(s));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared numeric helpers.
// ---------------------------------------------------------------------------

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / libm::sqrt(var + LN_EPS))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Row softmax with a structural mask; blocked entries come out exactly 0.
pub fn masked_softmax(logits: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let row = logits.row(r);
        let allowed = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let mut m = f64::NEG_INFINITY;
        for c in 0..cols {
            if allowed(c) {
                m = m.max(row[c]);
            }
        }
        if m == f64::NEG_INFINITY {
            continue; // fully blocked row stays zero
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if allowed(c) {
                let e = libm::exp(row[c] - m);
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..cols {
            if allowed(c) {
                out.set(r, c, out.get(r, c) / sum);
            } else {
                out.set(r, c, 0.0);
            }
        }
    }
    out
}

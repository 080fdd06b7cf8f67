//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient
//! of a scalar output with respect to every node that needs one. The
//! attention, layer-norm, linear and gIoU operations are fused into single
//! nodes with hand-written backward rules; everything else is elementwise
//! or structural.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_col_block, gemm_row_block, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization applied to attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    /// Row softmax over all keys.
    Softmax,
    /// Element-wise logistic, divided by the key count so rows stay in `[0, 1]`.
    Sigmoid,
    /// `exp(z_j) / (1 + Σ_k exp(z_k))`.
    SoftmaxOne,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Transpose(Var),
    AttnProbs { q: Var, k: Var, heads: usize, kind: AttnKind, scale: f64 },
    AttnApply { p: Var, v: Var, heads: usize },
    HeadMean { p: Var, heads: usize },
    GiouLoss { pred: Var, target: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    param_order: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512), param_vars: Vec::new(), param_order: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut out of the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Leaf bound to a parameter of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if i >= self.param_vars.len() {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.param_vars[i] = Some(v);
        self.param_order.push((id, v));
        v
    }

    /// Parameters touched by this tape, in first-use order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.param_order
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm(1.0, va.view(), vb.view(), 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm(1.0, va.view(), vb.view().t(), 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    /// `x · w + b` with `w` shaped `in × out` and `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let mut out = Matrix::zeros(vx.rows(), vw.cols());
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.shape(), (1, vw.cols()), "linear bias shape");
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(vb.row(0));
            }
            gemm(1.0, vx.view(), vw.view(), 1.0, &mut out);
        } else {
            gemm(1.0, vx.view(), vw.view(), 0.0, &mut out);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(r);
        assert_eq!(vr.shape(), (1, va.cols()), "add_row shape");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, x) in out.row_mut(i).iter_mut().zip(vr.row(0)) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(r);
        self.push(out, Op::AddRow(a, r), ng)
    }

    /// Scales row `i` of `a` by `c[i]`, where `c` is `m × 1`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let va = self.value(a);
        let vc = self.value(c);
        assert_eq!(vc.shape(), (va.rows(), 1), "mul_col shape");
        let mut out = va.clone();
        for i in 0..out.rows() {
            let s = vc.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(c);
        self.push(out, Op::MulCol(a, c), ng)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, x) in out.row_mut(0).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).rows().max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(va.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise log-sum-exp: `m × n → m × 1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| log_sum_exp(va.row(r))).collect();
        let out = Matrix::from_vec(va.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::LogSumExpRows(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let (m, n) = vx.shape();
        let mut xhat = Matrix::zeros(m, n);
        let mut out = Matrix::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd.push(s);
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.get(0, c) + vb.get(0, c));
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    // ---- structure --------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    // ---- fused attention ----------------------------------------------------

    /// Multi-head attention weights.
    ///
    /// `q` is `n × d`, `k` is `m × d`, `d` split evenly into `heads` column
    /// blocks. The result stacks the per-head `n × m` maps vertically, so
    /// row `h·n + i` is the distribution of query `i` under head `h`.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize, kind: AttnKind, scale: f64) -> Var {
        let vq = self.value(q);
        let vk = self.value(k);
        let (n, d) = vq.shape();
        let m = vk.rows();
        assert_eq!(vk.cols(), d, "attention q/k width mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let mut out = Matrix::zeros(heads * n, m);
        for h in 0..heads {
            gemm_row_block(scale, vq.col_block(h * dh, dh), vk.col_block(h * dh, dh).t(), 0.0, &mut out, h * n);
        }
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            match kind {
                AttnKind::Softmax => softmax_in_place(row),
                AttnKind::Sigmoid => {
                    let inv = 1.0 / m as f64;
                    row.iter_mut().for_each(|z| *z = sigmoid(*z) * inv);
                }
                AttnKind::SoftmaxOne => {
                    let mx = row.iter().copied().fold(0.0f64, f64::max);
                    let mut denom = (-mx).exp();
                    for z in row.iter_mut() {
                        *z = (*z - mx).exp();
                        denom += *z;
                    }
                    row.iter_mut().for_each(|z| *z /= denom);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        self.push(out, Op::AttnProbs { q, k, heads, kind, scale }, ng)
    }

    /// Applies stacked attention weights to values.
    ///
    /// Only the first `v.rows()` key columns of `p` carry values; columns
    /// beyond that (dummy keys) absorb weight but contribute nothing.
    pub fn attn_apply(&mut self, p: Var, v: Var, heads: usize) -> Var {
        let vp = self.value(p);
        let vv = self.value(v);
        let n = vp.rows() / heads;
        let (mv, d) = vv.shape();
        assert!(mv <= vp.cols(), "more values than keys");
        let dh = d / heads;
        let mut out = Matrix::zeros(n, d);
        for h in 0..heads {
            let ph = vp.view().row_block(h * n, n).col_block(0, mv);
            gemm_col_block(1.0, ph, vv.col_block(h * dh, dh), 0.0, &mut out, h * dh);
        }
        let ng = self.ng(p) || self.ng(v);
        self.push(out, Op::AttnApply { p, v, heads }, ng)
    }

    /// Average of stacked per-head maps: `(heads·n) × m → n × m`.
    pub fn head_mean(&mut self, p: Var, heads: usize) -> Var {
        let vp = self.value(p);
        let n = vp.rows() / heads;
        let m = vp.cols();
        let mut out = Matrix::zeros(n, m);
        for h in 0..heads {
            for i in 0..n {
                for (o, x) in out.row_mut(i).iter_mut().zip(vp.row(h * n + i)) {
                    *o += x;
                }
            }
        }
        out.scale_assign(1.0 / heads as f64);
        let ng = self.ng(p);
        self.push(out, Op::HeadMean { p, heads }, ng)
    }

    /// Per-row `1 − gIoU` between predicted `(center, width)` rows of `pred`
    /// and the constant `(center, width)` rows of `target`; `n × 1`.
    pub fn giou_loss(&mut self, pred: Var, target: Matrix) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape());
        assert_eq!(vp.cols(), 2);
        let data = (0..vp.rows())
            .map(|r| {
                let (l, _) = giou_terms(vp.row(r), target.row(r));
                l
            })
            .collect();
        let out = Matrix::from_vec(vp.rows(), 1, data);
        let ng = self.ng(pred);
        self.push(out, Op::GiouLoss { pred, target }, ng)
    }

    // ---- backward -----------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        self.backward_seeded(&[(loss, Matrix::scalar(1.0))])
    }

    /// Backward pass starting from arbitrary upstream gradients.
    ///
    /// Each seed `(v, g)` contributes `g` as `∂L/∂v`; this lets a loss that
    /// couples several tapes (batch-level contrastive terms) push its
    /// gradient into each of them.
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, g);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    gemm(1.0, g.view(), vb.view().t(), 1.0, grad_slot(grads, *a, va.shape()));
                }
                if self.ng(*b) {
                    gemm(1.0, va.view().t(), g.view(), 1.0, grad_slot(grads, *b, vb.shape()));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    gemm(1.0, g.view(), vb.view(), 1.0, grad_slot(grads, *a, va.shape()));
                }
                if self.ng(*b) {
                    gemm(1.0, g.view().t(), va.view(), 1.0, grad_slot(grads, *b, vb.shape()));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    gemm(1.0, g.view(), vw.view().t(), 1.0, grad_slot(grads, *x, vx.shape()));
                }
                if self.ng(*w) {
                    gemm(1.0, vx.view().t(), g.view(), 1.0, grad_slot(grads, *w, vw.shape()));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let slot = grad_slot(grads, *b, (1, g.cols()));
                        for r in 0..g.rows() {
                            for (s, x) in slot.row_mut(0).iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.ng(*x) {
                    accumulate(grads, *x, &g.transpose());
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    accumulate(grads, *b, &g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    accumulate(grads, *a, &g.zip_map(vb, |x, y| x * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, &g.zip_map(va, |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g);
                }
                if self.ng(*r) {
                    let slot = grad_slot(grads, *r, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (s, x) in slot.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                }
            }
            Op::MulCol(a, c) => {
                let (va, vc) = (self.value(*a), self.value(*c));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = vc.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(grads, *a, &ga);
                }
                if self.ng(*c) {
                    let data = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *c, &Matrix::from_vec(g.rows(), 1, data));
                }
            }
            Op::ScaleBy(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s).item());
                if self.ng(*a) {
                    accumulate(grads, *a, &g.map(|x| x * vs));
                }
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                    accumulate(grads, *s, &Matrix::scalar(d));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, &g.map(|x| x * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Relu(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, &g.zip_map(va, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::Sigmoid(a) => accumulate(grads, *a, &g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Exp(a) => accumulate(grads, *a, &g.zip_map(y, |d, e| d * e)),
            Op::Log(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, &g.zip_map(va, |d, x| d / x));
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, &g.zip_map(va, |d, x| d * sign(x)));
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, &g.zip_map(va, |d, x| d * sigmoid(x)));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                accumulate(grads, *x, &g.zip_map(vx, |d, v| if v > *lo && v < *hi { d } else { 0.0 }));
            }
            Op::Sum(a) => {
                let d = g.item();
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, &Matrix::filled(r, c, d));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let slot = grad_slot(grads, *a, (r, c));
                for i in 0..r {
                    for (s, x) in slot.row_mut(i).iter_mut().zip(g.row(0)) {
                        *s += x;
                    }
                }
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let slot = grad_slot(grads, *a, (r, c));
                for i in 0..r {
                    let d = g.get(i, 0);
                    slot.row_mut(i).iter_mut().for_each(|s| *s += d);
                }
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, p)| d * p).sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let lse = y.get(r, 0);
                    let d = g.get(r, 0);
                    for c in 0..va.cols() {
                        ga.set(r, c, d * (va.get(r, c) - lse).exp());
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, u)| d * u).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norms[r]);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let vg = self.value(*gamma);
                let (m, n) = xhat.shape();
                if self.ng(*gamma) {
                    let slot = grad_slot(grads, *gamma, (1, n));
                    for r in 0..m {
                        for c in 0..n {
                            slot.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.ng(*beta) {
                    let slot = grad_slot(grads, *beta, (1, n));
                    for r in 0..m {
                        for c in 0..n {
                            slot.data_mut()[c] += g.get(r, c);
                        }
                    }
                }
                if self.ng(*x) {
                    let slot = grad_slot(grads, *x, (m, n));
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            dxhat[c] = g.get(r, c) * vg.get(0, c);
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat.get(r, c);
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let row = slot.row_mut(r);
                        for c in 0..n {
                            row[c] += rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        accumulate(grads, p, &g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        accumulate(grads, p, &g.slice_cols(off, cols));
                    }
                    off += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.shape(*x);
                let slot = grad_slot(grads, *x, shape);
                for r in 0..g.rows() {
                    for (s, d) in slot.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *s += d;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x);
                let slot = grad_slot(grads, *x, shape);
                for r in 0..g.rows() {
                    for (s, d) in slot.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                        *s += d;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x);
                let slot = grad_slot(grads, *x, shape);
                for (r, &i) in idx.iter().enumerate() {
                    for (s, d) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                        *s += d;
                    }
                }
            }
            Op::AttnProbs { q, k, heads, kind, scale } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                let (n, d) = vq.shape();
                let m = vk.rows();
                let dh = d / heads;
                // dZ for every stacked row.
                let mut dz = Matrix::zeros(heads * n, m);
                for r in 0..heads * n {
                    let p = y.row(r);
                    let gr = g.row(r);
                    let out = dz.row_mut(r);
                    match kind {
                        AttnKind::Softmax | AttnKind::SoftmaxOne => {
                            let dot: f64 = gr.iter().zip(p).map(|(a, b)| a * b).sum();
                            for c in 0..m {
                                out[c] = p[c] * (gr[c] - dot);
                            }
                        }
                        AttnKind::Sigmoid => {
                            let mf = m as f64;
                            for c in 0..m {
                                out[c] = gr[c] * p[c] * (1.0 - mf * p[c]);
                            }
                        }
                    }
                }
                for h in 0..*heads {
                    let dzh = dz.view().row_block(h * n, n);
                    if self.ng(*q) {
                        let slot = grad_slot(grads, *q, (n, d));
                        gemm_col_block(*scale, dzh, vk.col_block(h * dh, dh), 1.0, slot, h * dh);
                    }
                    if self.ng(*k) {
                        let slot = grad_slot(grads, *k, (m, d));
                        gemm_col_block(*scale, dzh.t(), vq.col_block(h * dh, dh), 1.0, slot, h * dh);
                    }
                }
            }
            Op::AttnApply { p, v, heads } => {
                let (vp, vv) = (self.value(*p), self.value(*v));
                let n = vp.rows() / heads;
                let (mv, d) = vv.shape();
                let dh = d / heads;
                for h in 0..*heads {
                    let gh = g.col_block(h * dh, dh);
                    if self.ng(*p) {
                        // Only value-bearing columns receive gradient.
                        let mut dp = Matrix::zeros(n, mv);
                        gemm(1.0, gh, vv.col_block(h * dh, dh).t(), 0.0, &mut dp);
                        let slot = grad_slot(grads, *p, vp.shape());
                        for i in 0..n {
                            for (s, x) in slot.row_mut(h * n + i)[..mv].iter_mut().zip(dp.row(i)) {
                                *s += x;
                            }
                        }
                    }
                    if self.ng(*v) {
                        let ph = vp.view().row_block(h * n, n).col_block(0, mv);
                        let slot = grad_slot(grads, *v, (mv, d));
                        gemm_col_block(1.0, ph.t(), gh, 1.0, slot, h * dh);
                    }
                }
            }
            Op::HeadMean { p, heads } => {
                let shape = self.shape(*p);
                let n = shape.0 / heads;
                let inv = 1.0 / *heads as f64;
                let slot = grad_slot(grads, *p, shape);
                for h in 0..*heads {
                    for i in 0..n {
                        for (s, d) in slot.row_mut(h * n + i).iter_mut().zip(g.row(i)) {
                            *s += d * inv;
                        }
                    }
                }
            }
            Op::GiouLoss { pred, target } => {
                let vp = self.value(*pred);
                let mut gp = Matrix::zeros(vp.rows(), 2);
                for r in 0..vp.rows() {
                    let (_, (dc, dw)) = giou_terms(vp.row(r), target.row(r));
                    let d = g.get(r, 0);
                    gp.set(r, 0, d * dc);
                    gp.set(r, 1, d * dw);
                }
                accumulate(grads, *pred, &gp);
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    /// Moves out the gradients of every parameter the tape touched.
    pub fn into_param_grads(mut self, tape: &Tape) -> Vec<(ParamId, Matrix)> {
        tape.params()
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect()
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// `1 − gIoU` of a predicted `(center, width)` against a target, and its
/// partial derivatives with respect to the predicted center and width.
fn giou_terms(pred: &[f64], target: &[f64]) -> (f64, (f64, f64)) {
    let (s, e) = (pred[0] - 0.5 * pred[1], pred[0] + 0.5 * pred[1]);
    let (ts, te) = (target[0] - 0.5 * target[1], target[0] + 0.5 * target[1]);
    let raw = e.min(te) - s.max(ts);
    let inter = raw.max(0.0);
    let union = (e - s) + (te - ts) - inter;
    let hull = e.max(te) - s.min(ts);
    let loss = 2.0 - inter / union - union / hull;

    let (di_ds, di_de) = if raw > 0.0 {
        (if s >= ts { -1.0 } else { 0.0 }, if e <= te { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let dh_ds = if s < ts { -1.0 } else { 0.0 };
    let dh_de = if e > te { 1.0 } else { 0.0 };
    let d = |di: f64, du: f64, dh: f64| {
        let diou = (di * union - inter * du) / (union * union);
        let dratio = (du * hull - union * dh) / (hull * hull);
        -diou - dratio
    };
    let dl_ds = d(di_ds, du_ds, dh_ds);
    let dl_de = d(di_de, du_de, dh_de);
    (loss, (dl_ds + dl_de, 0.5 * (dl_de - dl_ds)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` built on a fresh tape for each probe.
    fn check(inputs: &[Matrix], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.input(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let step = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.wrt_or_zeros(&tape, vars[k]);
            for i in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += step;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rnd(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_and_matmul_gradients() {
        check(&[rnd(3, 4, 1), rnd(4, 2, 2), rnd(1, 2, 3)], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            let z = t.matmul(v[0], v[1]);
            let s = t.mul(y, z);
            t.sum(s)
        });
        check(&[rnd(3, 4, 4), rnd(5, 4, 5)], |t, v| {
            let z = t.matmul_nt(v[0], v[1]);
            let e = t.exp(z);
            t.sum(e)
        });
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        check(&[rnd(3, 4, 6), rnd(1, 4, 7), rnd(3, 1, 8), rnd(1, 1, 9)], |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_col(a, v[2]);
            let c = t.scale_by(b, v[3]);
            let d = t.sigmoid(c);
            let e = t.softplus(b);
            let f = t.sub(d, e);
            let g = t.sum_rows(f);
            let h = t.sum_cols(f);
            let hs = t.sum(h);
            let gs = t.mean(g);
            let x = t.mul(gs, hs);
            let ab = t.abs(a);
            let abs = t.sum(ab);
            t.add(x, abs)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        let w = rnd(3, 5, 10);
        check(&[rnd(3, 5, 11)], |t, v| {
            let wc = t.constant(w.clone());
            let s = t.softmax_rows(v[0]);
            let l = t.log_softmax_rows(v[0]);
            let e = t.log_sum_exp_rows(v[0]);
            let a = t.mul(s, wc);
            let b = t.mul(l, wc);
            let sa = t.sum(a);
            let sb = t.sum(b);
            let se = t.sum(e);
            let x = t.add(sa, sb);
            t.add(x, se)
        });
    }

    #[test]
    fn layer_norm_and_normalize_gradients() {
        let w = rnd(4, 6, 12);
        check(&[rnd(4, 6, 13), rnd(1, 6, 14), rnd(1, 6, 15)], |t, v| {
            let wc = t.constant(w.clone());
            let y = t.layer_norm(v[0], v[1], v[2]);
            let n = t.l2_normalize_rows(v[0]);
            let s = t.add(y, n);
            let p = t.mul(s, wc);
            t.sum(p)
        });
    }

    #[test]
    fn structural_gradients() {
        let w = rnd(5, 3, 16);
        check(&[rnd(2, 3, 17), rnd(3, 3, 18)], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]);
            let wc = t.constant(w.clone());
            let p = t.mul(c, wc);
            let s = t.slice_rows(p, 1, 3);
            let g = t.gather_rows(p, &[4, 0, 4]);
            let sc = t.slice_cols(g, 1, 2);
            let cc = t.concat_cols(&[sc, s]);
            let tr = t.transpose(cc);
            let sq = t.mul(tr, tr);
            t.sum(sq)
        });
    }

    #[test]
    fn attention_gradients_all_kinds() {
        for kind in [AttnKind::Softmax, AttnKind::Sigmoid, AttnKind::SoftmaxOne] {
            let w = rnd(3, 4, 19);
            let wp = rnd(6, 5, 20);
            check(&[rnd(3, 4, 21), rnd(5, 4, 22), rnd(3, 4, 23)], |t, v| {
                let p = t.attn_probs(v[0], v[1], 2, kind, 0.7);
                let o = t.attn_apply(p, v[2], 2);
                let wc = t.constant(w.clone());
                let wpc = t.constant(wp.clone());
                let a = t.mul(o, wc);
                let b = t.mul(p, wpc);
                let hm = t.head_mean(p, 2);
                let hs = t.sum_cols(hm);
                let hsq = t.mul(hs, hs);
                let sa = t.sum(a);
                let sb = t.sum(b);
                let sh = t.sum(hsq);
                let x = t.add(sa, sb);
                t.add(x, sh)
            });
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut t = Tape::new();
        let q = t.input(rnd(4, 6, 24));
        let k = t.input(rnd(7, 6, 25));
        let p = t.attn_probs(q, k, 3, AttnKind::Softmax, 0.5);
        let pv = t.value(p);
        for r in 0..pv.rows() {
            assert!((pv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let p1 = t.attn_probs(q, k, 3, AttnKind::SoftmaxOne, 0.5);
        for r in 0..t.value(p1).rows() {
            let s: f64 = t.value(p1).row(r).iter().sum();
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn giou_loss_gradient() {
        let target = Matrix::from_rows(&[vec![0.5, 0.2], vec![0.3, 0.4], vec![0.7, 0.1]]);
        let pred = Matrix::from_rows(&[vec![0.45, 0.32], vec![0.8, 0.2], vec![0.71, 0.05]]);
        check(&[pred], |t, v| {
            let l = t.giou_loss(v[0], target.clone());
            t.sum(l)
        });
    }

    #[test]
    fn seeded_backward_adds_upstream_gradient() {
        let mut t = Tape::new();
        let x = t.input(Matrix::row_vector(&[1.0, 2.0]));
        let y = t.scale(x, 3.0);
        let g = t.backward_seeded(&[(y, Matrix::row_vector(&[1.0, -1.0]))]);
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let x = t.input(Matrix::scalar(3.0));
        let y = t.mul(c, x);
        let g = t.backward(y);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
    }
}

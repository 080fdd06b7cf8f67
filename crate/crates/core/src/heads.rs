//! Transformer encoder over `[T; clips]`, a set-prediction decoder with
//! learned moment queries, one-dimensional gIoU, bipartite matching and the
//! moment-retrieval loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, DecoderBlock, Init, LayerNorm, Linear, ParamId, SelfBlock};
use crate::tensor::Matrix;
use crate::types::{LossWeights, MomentSpan};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<SelfBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize, ff: usize, layers: usize) -> Self {
        let layers = (0..layers).map(|l| SelfBlock::new(init, &format!("enc{l}"), dim, heads, ff)).collect();
        Self { layers, norm: LayerNorm::new(init, "enc.norm", dim) }
    }

    /// Pre-norm encoder; `pos` is added to queries and keys in every layer.
    /// With no layers the input passes through untouched.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, x: Var, pos: Var) -> Var {
        if self.layers.is_empty() {
            return x;
        }
        let mut x = x;
        for l in &self.layers {
            x = l.forward(tape, ctx, x, Some(pos));
        }
        self.norm.forward(tape, ctx, x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub span_hidden: Linear,
    pub span_out: Linear,
    pub class: Linear,
}

/// Decoder predictions: `spans` is `n_q × 2` (center, width) in (0, 1),
/// `logits` is `n_q × 1` foreground logits.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub spans: Var,
    pub logits: Var,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize, ff: usize, layers: usize, n_queries: usize) -> Self {
        let queries = init.normal("dec.queries", n_queries, dim, 1.0);
        let layers = (0..layers).map(|l| DecoderBlock::new(init, &format!("dec{l}"), dim, heads, ff)).collect();
        Self {
            queries,
            layers,
            norm: LayerNorm::new(init, "dec.norm", dim),
            span_hidden: Linear::new(init, "dec.span_hidden", dim, dim),
            span_out: Linear::zeroed(init, "dec.span_out", dim, 2),
            class: Linear::new(init, "dec.class", dim, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, memory: Var, memory_pos: Var) -> DecoderOutput {
        let query_pos = ctx.p(tape, self.queries);
        let n_q = tape.shape(query_pos).0;
        let dim = tape.shape(memory).1;
        let mut x = tape.constant(Matrix::zeros(n_q, dim));
        for l in &self.layers {
            x = l.forward(tape, ctx, x, query_pos, memory, memory_pos);
        }
        let x = self.norm.forward(tape, ctx, x);
        let h = self.span_hidden.forward(tape, ctx, x);
        let h = tape.relu(h);
        let raw = self.span_out.forward(tape, ctx, h);
        let spans = tape.sigmoid(raw);
        let logits = self.class.forward(tape, ctx, x);
        DecoderOutput { spans, logits }
    }
}

/// Generalized IoU of two spans.
pub fn giou_1d(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let (a0, a1) = (a.center - 0.5 * a.width, a.center + 0.5 * a.width);
    let (b0, b1) = (b.center - 0.5 * b.width, b.center + 0.5 * b.width);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    let hull = a1.max(b1) - a0.min(b0);
    inter / union - (hull - union) / hull
}

/// Matching cost of one prediction against one target.
pub fn match_cost(pred: &MomentSpan, fg_prob: f64, target: &MomentSpan, w: &LossWeights) -> f64 {
    let l1 = (pred.center - target.center).abs() + (pred.width - target.width).abs();
    w.l1 * l1 + w.giou * (1.0 - giou_1d(pred, target)) + w.ce * (1.0 - fg_prob)
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows ≤ cols`), returned as the column chosen for each row.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian needs rows <= cols");
    // potentials formulation with 1-based sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Exhaustive search over injective row-to-column maps. Practical only for
/// a handful of rows.
pub fn exhaustive_assignment(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m);
    let mut best = (f64::INFINITY, Vec::new());
    let mut cur = Vec::with_capacity(n);
    let mut used = vec![false; m];
    fn go(cost: &Matrix, acc: f64, cur: &mut Vec<usize>, used: &mut [bool], best: &mut (f64, Vec<usize>)) {
        let r = cur.len();
        if r == cost.rows() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(cost, acc + cost.get(r, c), cur, used, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    go(cost, 0.0, &mut cur, &mut used, &mut best);
    best.1
}

/// One-to-one matching of targets to predictions, as `(prediction, target)`
/// pairs ordered by target.
pub fn match_predictions(
    preds: &[MomentSpan],
    fg_probs: &[f64],
    targets: &[MomentSpan],
    weights: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    if targets.len() > preds.len() {
        return Err(Error::config(format!(
            "{} target spans exceed {} moment queries",
            targets.len(),
            preds.len()
        )));
    }
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let mut cost = Matrix::zeros(targets.len(), preds.len());
    for (g, t) in targets.iter().enumerate() {
        for (q, p) in preds.iter().enumerate() {
            cost.set(g, q, match_cost(p, fg_probs[q], t, weights));
        }
    }
    let cols = if targets.len() <= 4 { exhaustive_assignment(&cost) } else { hungarian(&cost) };
    Ok(cols.into_iter().enumerate().map(|(g, q)| (q, g)).collect())
}

/// Reads decoder outputs back as spans and foreground probabilities.
pub fn decoded_spans(tape: &Tape, out: &DecoderOutput) -> (Vec<MomentSpan>, Vec<f64>) {
    let s = tape.value(out.spans);
    let l = tape.value(out.logits);
    let spans = (0..s.rows()).map(|r| MomentSpan::clamped(s.get(r, 0), s.get(r, 1))).collect();
    let probs = l.data().iter().map(|&z| sigmoid(z)).collect();
    (spans, probs)
}

/// Unweighted moment-retrieval terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct MrLoss {
    pub l1: Var,
    pub giou: Var,
    pub ce: Var,
    pub total: Var,
}

/// L1 and gIoU over matched pairs plus foreground cross-entropy over every
/// query, with the matching held fixed.
pub fn loss_mr(
    tape: &mut Tape,
    out: &DecoderOutput,
    matching: &[(usize, usize)],
    targets: &[MomentSpan],
    weights: &LossWeights,
) -> MrLoss {
    let n_q = tape.shape(out.logits).0;
    let (l1, giou) = if matching.is_empty() {
        let z = tape.constant(Matrix::scalar(0.0));
        (z, z)
    } else {
        let idx: Vec<usize> = matching.iter().map(|&(q, _)| q).collect();
        let pred = tape.gather_rows(out.spans, &idx);
        let target = Matrix::from_rows(
            &matching.iter().map(|&(_, g)| vec![targets[g].center, targets[g].width]).collect::<Vec<_>>(),
        );
        let t = tape.constant(target.clone());
        let d = tape.sub(pred, t);
        let a = tape.abs(d);
        let s = tape.sum(a);
        let l1 = tape.scale(s, 1.0 / matching.len() as f64);
        let g = tape.giou_loss(pred, target);
        (l1, tape.mean(g))
    };
    let mut labels = Matrix::zeros(n_q, 1);
    for &(q, _) in matching {
        labels.set(q, 0, 1.0);
    }
    let labels = tape.constant(labels);
    let sp = tape.softplus(out.logits);
    let zt = tape.mul(out.logits, labels);
    let bce = tape.sub(sp, zt);
    let ce = tape.mean(bce);

    let a = tape.scale(l1, weights.l1);
    let b = tape.scale(giou, weights.giou);
    let c = tape.scale(ce, weights.ce);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    MrLoss { l1, giou, ce, total }
}

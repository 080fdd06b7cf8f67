//! Adaptive cross-attention: video clips attend to text tokens plus
//! query-conditioned dummy tokens that soak up attention for irrelevant clips.
//!
//! The share of a clip's attention that lands on real text keys is its
//! query correspondence `ā`; it is supervised with a binary cross-entropy
//! against clip relevance, and the dummies are kept apart by an
//! orthogonality penalty.

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnKind, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{CrossBlock, Ctx, Init, ParamId};
use crate::tensor::Matrix;
use crate::types::AttentionVariant;

/// Clamp applied to `ā` inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-6;

/// Learnable dummy tokens and the encoder that conditions them on a query.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DummyBank {
    pub raw: ParamId,
    pub encoder: Vec<CrossBlock>,
}

impl DummyBank {
    pub fn new(init: &mut Init<'_>, count: usize, dim: usize, heads: usize, ff: usize, layers: usize) -> Self {
        let raw = init.normal("dummy.raw", count, dim, 1.0);
        let encoder = (0..layers)
            .map(|l| CrossBlock::new(init, &format!("dummy.enc{l}"), dim, heads, ff))
            .collect();
        Self { raw, encoder }
    }
}

/// Encodes the dummies against the word states of one query.
///
/// Each layer lets the dummies attend to the words, then applies a
/// feed-forward block, both with residuals. With zero layers the raw
/// dummies are returned unchanged.
pub fn encode_dummies(
    tape: &mut Tape,
    ctx: &mut Ctx<'_>,
    bank: &DummyBank,
    layers: usize,
    words: Var,
) -> Result<Var> {
    if tape.shape(words).0 == 0 {
        return Err(Error::EmptyQuery);
    }
    let mut d = ctx.p(tape, bank.raw);
    for block in bank.encoder.iter().take(layers) {
        let (next, _) = block.forward(tape, ctx, d, words, words, AttnKind::Softmax);
        d = next;
    }
    Ok(d)
}

/// Output of one adaptive cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    /// Updated clip states, `L_v × h`.
    pub fused: Var,
    /// Head-averaged weights over text keys then dummy keys, `L_v × (L_q + L_d)`.
    pub weights: Var,
    /// Query correspondence per clip, `L_v × 1`.
    pub a_bar: Var,
    /// Per-head weights stacked by head, `heads·L_v × keys`.
    pub probs: Var,
}

pub fn attn_kind(variant: AttentionVariant) -> AttnKind {
    match variant {
        AttentionVariant::Aca | AttentionVariant::PlainSoftmax => AttnKind::Softmax,
        AttentionVariant::Sigmoid => AttnKind::Sigmoid,
        AttentionVariant::SoftmaxOne => AttnKind::SoftmaxOne,
    }
}

/// One cross-attention layer from clips to `[words; dummies]`.
///
/// Keys are the concatenation of word states and encoded dummies, values
/// are the word states alone, so weight placed on a dummy removes text
/// content from that clip's update.
pub fn adaptive_cross_attention(
    tape: &mut Tape,
    ctx: &mut Ctx<'_>,
    block: &CrossBlock,
    clips: Var,
    words: Var,
    dummies: Option<Var>,
    variant: AttentionVariant,
) -> Result<AttentionRecord> {
    let n_text = tape.shape(words).0;
    if n_text == 0 {
        return Err(Error::EmptyQuery);
    }
    let dummies = if variant == AttentionVariant::Aca { dummies } else { None };
    let keys = match dummies {
        Some(d) => tape.concat_rows(&[words, d]),
        None => words,
    };
    let (fused, probs) = block.forward(tape, ctx, clips, keys, words, attn_kind(variant));
    if !tape.value(probs).is_finite() {
        return Err(Error::Numerics("non-finite cross-attention weights".into()));
    }
    let weights = tape.head_mean(probs, block.attn.heads);
    let a_bar = query_correspondence(tape, weights, n_text);
    Ok(AttentionRecord { fused, weights, a_bar, probs })
}

/// `ā_i = Σ_{j ≤ L_q} W_ij`, as an `L_v × 1` node.
pub fn query_correspondence(tape: &mut Tape, weights: Var, n_text: usize) -> Var {
    let text = tape.slice_cols(weights, 0, n_text);
    tape.sum_cols(text)
}

/// Value-level `ā` for a weight matrix whose first `n_text` columns are text keys.
pub fn query_correspondence_values(weights: &Matrix, n_text: usize) -> Vec<f64> {
    (0..weights.rows()).map(|i| weights.row(i)[..n_text].iter().sum::<f64>()).collect()
}

/// Binary cross-entropy between `ā` (`L_v × 1`) and binary clip relevance,
/// averaged over clips.
pub fn loss_bce(tape: &mut Tape, a_bar: Var, relevance: &[bool]) -> Result<Var> {
    let (n, c) = tape.shape(a_bar);
    if n != relevance.len() || c != 1 {
        return Err(Error::Shape(format!("a_bar is {n}x{c} but relevance has {} clips", relevance.len())));
    }
    let target: Vec<f64> = relevance.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let t = tape.constant(Matrix::from_vec(n, 1, target.clone()));
    let t_neg = tape.constant(Matrix::from_vec(n, 1, target.iter().map(|v| 1.0 - v).collect()));
    let a = tape.clamp(a_bar, BCE_EPS, 1.0 - BCE_EPS);
    let log_a = tape.log(a);
    let neg_a = tape.neg(a);
    let one_minus = tape.add_scalar(neg_a, 1.0);
    let log_1ma = tape.log(one_minus);
    let pos = tape.mul(t, log_a);
    let neg = tape.mul(t_neg, log_1ma);
    let ll = tape.add(pos, neg);
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// Value-level binary cross-entropy on `ā`.
pub fn bce(a_bar: &[f64], relevance: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::from_vec(a_bar.len(), 1, a_bar.to_vec()));
    let l = loss_bce(&mut tape, a, relevance)?;
    Ok(tape.scalar(l))
}

/// Mean absolute cosine similarity over ordered pairs of distinct dummies.
pub fn loss_ortho(tape: &mut Tape, dummies: Var) -> Var {
    let n = tape.shape(dummies).0;
    if n < 2 {
        return tape.constant(Matrix::scalar(0.0));
    }
    let unit = tape.l2_normalize_rows(dummies);
    let gram = tape.matmul_nt(unit, unit);
    let abs = tape.abs(gram);
    let mut mask = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        mask.set(i, i, 0.0);
    }
    let mask = tape.constant(mask);
    let off = tape.mul(abs, mask);
    let s = tape.sum(off);
    tape.scale(s, 1.0 / (n * (n - 1)) as f64)
}

/// Value-level orthogonality loss.
pub fn ortho(dummies: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let d = tape.constant(dummies.clone());
    let l = loss_ortho(&mut tape, d);
    tape.scalar(l)
}

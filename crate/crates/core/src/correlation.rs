//! Clip-word correlation learner.
//!
//! Moment and sentence prototypes are pooled by prepending a learnable token
//! to a self-attention stack over positive clips, negative clips, words and
//! dummies. A contrastive objective aligns the prototypes across the batch,
//! and the projected tokens yield a clip-word guidance map that is distilled
//! into the cross-attention weights. None of this runs at inference.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId, SelfBlock};
use crate::tensor::Matrix;
use crate::types::DistillNormalizer;

/// Floor inside the logarithms of the distillation loss.
pub const KL_EPS: f64 = 1e-9;
/// Upper clamp on the negative-pair ratio before taking `−log(1 − ·)`.
pub const ALIGN_RATIO_MAX: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationLearner {
    pub moment_token: ParamId,
    pub sentence_token: ParamId,
    pub moment_enc: Vec<SelfBlock>,
    pub sentence_enc: Vec<SelfBlock>,
}

impl CorrelationLearner {
    pub fn new(
        init: &mut Init<'_>,
        dim: usize,
        heads: usize,
        ff: usize,
        moment_layers: usize,
        sentence_layers: usize,
    ) -> Self {
        let moment_token = init.normal("ccl.moment_token", 1, dim, 1.0);
        let sentence_token = init.normal("ccl.sentence_token", 1, dim, 1.0);
        let moment_enc = (0..moment_layers)
            .map(|l| SelfBlock::new(init, &format!("ccl.moment{l}"), dim, heads, ff))
            .collect();
        let sentence_enc = (0..sentence_layers)
            .map(|l| SelfBlock::new(init, &format!("ccl.sentence{l}"), dim, heads, ff))
            .collect();
        Self { moment_token, sentence_token, moment_enc, sentence_enc }
    }
}

/// A pooled prototype (`1 × h`) and the tokens it was pooled with (`n × h`).
#[derive(Clone, Copy, Debug)]
pub struct Prototype {
    pub token: Var,
    pub projected: Var,
}

/// Runs `blocks` over `[token; tokens]` without positional codes and splits
/// the result back into the token slot and the projected sequence.
pub fn pool_with_token(
    tape: &mut Tape,
    ctx: &mut Ctx<'_>,
    token: Var,
    tokens: Var,
    blocks: &[SelfBlock],
) -> Prototype {
    let n = tape.shape(tokens).0;
    let mut seq = tape.concat_rows(&[token, tokens]);
    for b in blocks {
        seq = b.forward(tape, ctx, seq, None);
    }
    Prototype { token: tape.slice_rows(seq, 0, 1), projected: tape.slice_rows(seq, 1, n) }
}

#[derive(Clone, Copy, Debug)]
pub struct VisualPrototypes {
    /// Moment prototype over relevant clips and their projections.
    pub pos: Option<Prototype>,
    /// Moment prototype over irrelevant clips.
    pub neg: Option<Prototype>,
}

/// Moment prototypes from the clips split by relevance. A side with no clips
/// has no prototype.
pub fn build_visual_prototypes(
    tape: &mut Tape,
    ctx: &mut Ctx<'_>,
    learner: &CorrelationLearner,
    clips: Var,
    relevance: &[bool],
) -> Result<VisualPrototypes> {
    let n = tape.shape(clips).0;
    if n != relevance.len() {
        return Err(Error::Shape(format!("{n} clips but {} relevance labels", relevance.len())));
    }
    let pos_idx: Vec<usize> = (0..n).filter(|&i| relevance[i]).collect();
    let neg_idx: Vec<usize> = (0..n).filter(|&i| !relevance[i]).collect();
    if pos_idx.is_empty() && neg_idx.is_empty() {
        return Err(Error::EmptyInstance);
    }
    let mut side = |tape: &mut Tape, idx: &[usize]| {
        if idx.is_empty() {
            return None;
        }
        let token = ctx.p(tape, learner.moment_token);
        let subset = tape.gather_rows(clips, idx);
        Some(pool_with_token(tape, ctx, token, subset, &learner.moment_enc))
    };
    let pos = side(tape, &pos_idx);
    let neg = side(tape, &neg_idx);
    Ok(VisualPrototypes { pos, neg })
}

#[derive(Clone, Copy, Debug)]
pub struct TextualPrototypes {
    /// Sentence prototype over the words, with projected words `Q̂`.
    pub pos: Prototype,
    /// Sentence prototype over the encoded dummies, with projected dummies `D̂`.
    pub neg: Option<Prototype>,
}

/// Sentence prototypes from the words and, when present, the encoded dummies.
pub fn build_textual_prototypes(
    tape: &mut Tape,
    ctx: &mut Ctx<'_>,
    learner: &CorrelationLearner,
    words: Var,
    dummies: Option<Var>,
) -> Result<TextualPrototypes> {
    if tape.shape(words).0 == 0 {
        return Err(Error::EmptyQuery);
    }
    let token = ctx.p(tape, learner.sentence_token);
    let pos = pool_with_token(tape, ctx, token, words, &learner.sentence_enc);
    let neg = dummies.map(|d| {
        let token = ctx.p(tape, learner.sentence_token);
        pool_with_token(tape, ctx, token, d, &learner.sentence_enc)
    });
    Ok(TextualPrototypes { pos, neg })
}

/// The four prototype slots of one instance; any may be absent.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlignItem {
    pub m_pos: Option<Var>,
    pub m_neg: Option<Var>,
    pub s_pos: Option<Var>,
    pub s_neg: Option<Var>,
}

/// Batch contrastive alignment between sentence and moment prototypes.
///
/// Every present moment prototype in the batch, positive or negative, sits
/// in the denominator. The positive sentence prototype is pulled toward its
/// own positive moment; the negative sentence prototype is pushed away from
/// its own negative moment. Prototypes are compared after L2 normalization
/// and the result is averaged over instances.
pub fn loss_align(tape: &mut Tape, items: &[AlignItem], tau: f64) -> Result<Var> {
    if items.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let mut moments = Vec::new();
    let mut slot = Vec::with_capacity(items.len());
    for it in items {
        let p = it.m_pos.map(|m| {
            moments.push(m);
            moments.len() - 1
        });
        let n = it.m_neg.map(|m| {
            moments.push(m);
            moments.len() - 1
        });
        slot.push((p, n));
    }
    let mut terms = Vec::new();
    if !moments.is_empty() {
        let all = tape.concat_rows(&moments);
        let all = tape.l2_normalize_rows(all);
        let k = moments.len();

        let (pos_rows, pos_cols): (Vec<Var>, Vec<usize>) = items
            .iter()
            .zip(&slot)
            .filter_map(|(it, &(p, _))| Some((it.s_pos?, p?)))
            .unzip();
        if !pos_rows.is_empty() {
            let (logits, num) = similarity_terms(tape, &pos_rows, &pos_cols, all, k, tau);
            let lse = tape.log_sum_exp_rows(logits);
            let l = tape.sub(lse, num);
            terms.push(tape.sum(l));
        }

        let (neg_rows, neg_cols): (Vec<Var>, Vec<usize>) = items
            .iter()
            .zip(&slot)
            .filter_map(|(it, &(_, n))| Some((it.s_neg?, n?)))
            .unzip();
        if !neg_rows.is_empty() {
            let (logits, num) = similarity_terms(tape, &neg_rows, &neg_cols, all, k, tau);
            let lse = tape.log_sum_exp_rows(logits);
            let log_ratio = tape.sub(num, lse);
            let ratio = tape.exp(log_ratio);
            let ratio = tape.clamp(ratio, -1.0, ALIGN_RATIO_MAX);
            let neg_ratio = tape.neg(ratio);
            let comp = tape.add_scalar(neg_ratio, 1.0);
            let log_comp = tape.log(comp);
            let s = tape.sum(log_comp);
            terms.push(tape.neg(s));
        }
    }
    let total = match terms.as_slice() {
        [] => tape.constant(Matrix::scalar(0.0)),
        [t] => *t,
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    };
    let out = tape.scale(total, 1.0 / items.len() as f64);
    if !tape.value(out).is_finite() {
        return Err(Error::Numerics("non-finite alignment loss".into()));
    }
    Ok(out)
}

/// Temperature-scaled similarities of normalized sentence prototypes against
/// all moments (`n × k`) and each row's own entry (`n × 1`).
fn similarity_terms(
    tape: &mut Tape,
    rows: &[Var],
    cols: &[usize],
    moments: Var,
    k: usize,
    tau: f64,
) -> (Var, Var) {
    let s = tape.concat_rows(rows);
    let s = tape.l2_normalize_rows(s);
    let sim = tape.matmul_nt(s, moments);
    let logits = tape.scale(sim, 1.0 / tau);
    let mut mask = Matrix::zeros(rows.len(), k);
    for (r, &c) in cols.iter().enumerate() {
        mask.set(r, c, 1.0);
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(logits, mask);
    let num = tape.sum_cols(picked);
    (logits, num)
}

/// Clip-word guidance: for each projected positive clip, a softmax over its
/// similarities to the projected words followed by the projected dummies.
pub fn guidance_map(v_hat_pos: &Matrix, q_hat: &Matrix, d_hat: Option<&Matrix>) -> Matrix {
    let keys = match d_hat {
        Some(d) => Matrix::concat_rows(&[q_hat, d]),
        None => q_hat.clone(),
    };
    let mut g = v_hat_pos.matmul(&keys.transpose());
    for r in 0..g.rows() {
        softmax_in_place(g.row_mut(r));
    }
    g
}

/// KL divergence from the guidance `G` (rows = relevant clips, in order) to
/// the attention weights `W` (rows = all clips), summed over relevant clips.
/// `G` is treated as a constant.
pub fn loss_distill(
    tape: &mut Tape,
    weights: Var,
    guidance: &Matrix,
    relevance: &[bool],
    normalizer: DistillNormalizer,
) -> Result<Var> {
    let (n, k) = tape.shape(weights);
    if n != relevance.len() {
        return Err(Error::Shape(format!("{n} attention rows but {} relevance labels", relevance.len())));
    }
    let pos: Vec<usize> = (0..n).filter(|&i| relevance[i]).collect();
    if pos.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    if guidance.shape() != (pos.len(), k) {
        return Err(Error::Shape(format!(
            "guidance is {:?}, expected ({}, {k})",
            guidance.shape(),
            pos.len()
        )));
    }
    let w = tape.gather_rows(weights, &pos);
    let w_floor = tape.clamp(w, KL_EPS, f64::INFINITY);
    let log_w = tape.log(w_floor);
    let log_g = tape.constant(guidance.map(|g| g.max(KL_EPS).ln()));
    let diff = tape.sub(log_w, log_g);
    let kl = tape.mul(w, diff);
    let s = tape.sum(kl);
    let denom = match normalizer {
        DistillNormalizer::AllClips => n,
        DistillNormalizer::PositiveClips => pos.len(),
    };
    Ok(tape.scale(s, 1.0 / denom as f64))
}

/// Value-level distillation loss.
pub fn kl_distill(
    weights: &Matrix,
    guidance: &Matrix,
    relevance: &[bool],
    normalizer: DistillNormalizer,
) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.constant(weights.clone());
    let l = loss_distill(&mut tape, w, guidance, relevance, normalizer)?;
    Ok(tape.scalar(l))
}

//! Moment-adaptive saliency token.
//!
//! A context token (mean of fused clips) is shifted by the few pool
//! candidates that best describe the clips' deviations from that context,
//! weighted by query correspondence. The resulting token is encoded with the
//! clips, and clip saliency is its scaled dot product with each encoded clip
//! through the cross-attention query projection.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::nn::{Ctx, Init, Linear, ParamId};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidatePool {
    pub pool: ParamId,
}

impl CandidatePool {
    pub fn new(init: &mut Init<'_>, size: usize, dim: usize) -> Self {
        let bound = (1.0 / dim as f64).sqrt();
        Self { pool: init.normal("msd.pool", size, dim, bound) }
    }
}

/// Intermediate values of one saliency-token construction.
#[derive(Clone, Debug)]
pub struct SaliencyState {
    pub context: Var,
    /// `1 × L_p` candidate weights.
    pub weights: Var,
    pub top_k: Vec<usize>,
    pub token: Var,
}

/// Mean over clips, `1 × h`.
pub fn context_token(tape: &mut Tape, clips: Var) -> Var {
    tape.mean_rows(clips)
}

/// `C_j = Σ_i ā_i softmax_j((v_i − ctx)·P_j)`, returned as `1 × L_p`.
pub fn candidate_weights(tape: &mut Tape, clips: Var, context: Var, pool: Var, a_bar: Var) -> Var {
    let neg_ctx = tape.neg(context);
    let diff = tape.add_row(clips, neg_ctx);
    let logits = tape.matmul_nt(diff, pool);
    let probs = tape.softmax_rows(logits);
    let weighted = tape.mul_col(probs, a_bar);
    tape.sum_rows(weighted)
}

/// Indices of the `k` largest weights, ties going to the lower index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `T = ctx + Σ_{j ∈ idx} C_j P_j`. The selection itself carries no gradient.
pub fn build_saliency_token(tape: &mut Tape, context: Var, pool: Var, weights: Var, idx: &[usize]) -> Var {
    if idx.is_empty() {
        return context;
    }
    let col = tape.transpose(weights);
    let picked = tape.gather_rows(col, idx);
    let picked = tape.transpose(picked);
    let cands = tape.gather_rows(pool, idx);
    let shift = tape.matmul(picked, cands);
    tape.add(context, shift)
}

/// Full construction from fused clips, pool parameters and `ā`.
pub fn saliency_token(
    tape: &mut Tape,
    ctx: &Ctx<'_>,
    pool: &CandidatePool,
    clips: Var,
    a_bar: Var,
    k: usize,
) -> SaliencyState {
    let context = context_token(tape, clips);
    let p = ctx.p(tape, pool.pool);
    let weights = candidate_weights(tape, clips, context, p, a_bar);
    let top_k = top_k_indices(tape.value(weights).data(), k);
    let token = build_saliency_token(tape, context, p, weights, &top_k);
    SaliencyState { context, weights, top_k, token }
}

/// `s_i = (p_Q(t_enc) · v_enc_i) / √h` as an `L_v × 1` column.
pub fn saliency_scores(tape: &mut Tape, ctx: &Ctx<'_>, proj: &Linear, token: Var, clips: Var) -> Var {
    let h = tape.shape(token).1;
    let t = proj.forward(tape, ctx, token);
    let s = tape.matmul_nt(clips, t);
    tape.scale(s, 1.0 / (h as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(clips: &Matrix, pool: &Matrix, a_bar: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let c = tape.constant(clips.clone());
        let p = tape.constant(pool.clone());
        let a = tape.constant(Matrix::from_vec(a_bar.len(), 1, a_bar.to_vec()));
        let ctx = context_token(&mut tape, c);
        let w = candidate_weights(&mut tape, c, ctx, p, a);
        tape.value(w).data().to_vec()
    }

    #[test]
    fn context_token_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = context_token(&mut tape, c);
        assert_eq!(tape.value(m).data(), &[0.5, 0.5]);
        let c = tape.constant(Matrix::from_rows(&[vec![0.3, -2.0], vec![-0.3, 2.0]]));
        let m = context_token(&mut tape, c);
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);
    }

    #[test]
    fn candidate_weight_examples() {
        // single clip equals its own mean: uniform softmax
        let w = weights(&Matrix::row_vector(&[0.4, 0.1]), &Matrix::randn(4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1)), &[0.8]);
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-12));

        let clips = Matrix::randn(5, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let pool = Matrix::randn(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(weights(&clips, &pool, &[0.0; 5]).iter().all(|v| *v == 0.0));

        let a = [0.1, 0.9, 0.5, 0.0, 0.3];
        let w = weights(&clips, &pool, &a);
        assert!(w.iter().all(|v| *v >= 0.0));
        assert!((w.iter().sum::<f64>() - a.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn candidate_weights_ln2_example() {
        // two clips so the context differs from each clip; the first clip's
        // offset from the mean is (ln 2, 0) against pool rows e1 and 0
        let ln2 = std::f64::consts::LN_2;
        let clips = Matrix::from_rows(&[vec![ln2, 0.0], vec![-ln2, 0.0]]);
        let pool = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let w = weights(&clips, &pool, &[1.0, 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k_indices(&[0.2, 0.5, 0.5, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.3, 0.3, 0.3], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.1, 0.7], 2), vec![1, 0]);
    }

    fn token(ctx: &[f64], pool: &Matrix, c: &[f64], k: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let cx = tape.constant(Matrix::row_vector(ctx));
        let p = tape.constant(pool.clone());
        let w = tape.constant(Matrix::row_vector(c));
        let idx = top_k_indices(c, k);
        let t = build_saliency_token(&mut tape, cx, p, w, &idx);
        tape.value(t).data().to_vec()
    }

    #[test]
    fn saliency_token_examples() {
        let pool = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(token(&[0.1, 0.2], &pool, &[0.0, 0.0], 1), vec![0.1, 0.2]);
        let t = token(&[0.1, 0.2], &pool, &[0.6, 0.4], 1);
        assert!((t[0] - 0.7).abs() < 1e-12 && (t[1] - 1.4).abs() < 1e-12);
        let t = token(&[0.0, 0.0], &pool, &[0.6, 0.4], 2);
        assert!((t[0] - (0.6 - 1.2)).abs() < 1e-12 && (t[1] - (1.2 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn token_ignores_unselected_candidates() {
        let pool = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.2, 0.2]]);
        let mut other = pool.clone();
        other.row_mut(1).copy_from_slice(&[9.0, -9.0]);
        let c = [0.5, 0.1, 0.4];
        assert_eq!(token(&[0.3, 0.0], &pool, &c, 2), token(&[0.3, 0.0], &other, &c, 2));
    }

    #[test]
    fn saliency_score_examples() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let proj = Linear::zeroed(&mut init, "q", 4, 4);
        *store.value_mut(proj.w) = Matrix::identity(4);
        let score = |store: &ParamStore, t: &[f64], clips: &Matrix| {
            let ctx = Ctx::eval(store);
            let mut tape = Tape::new();
            let t = tape.constant(Matrix::row_vector(t));
            let c = tape.constant(clips.clone());
            let s = saliency_scores(&mut tape, &ctx, &proj, t, c);
            tape.value(s).data().to_vec()
        };
        let clips = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]]);
        let s = score(&store, &[1.0, 0.0, 0.0, 0.0], &clips);
        assert!((s[0] - 0.5).abs() < 1e-12 && s[1] == 0.0);
        assert_eq!(score(&store, &[0.0, 1.0, 0.0, 0.0], &clips), vec![0.0, 0.0]);
        store.value_mut(proj.w).set(0, 0, 2.0);
        let s = score(&store, &[1.0, 0.0, 0.0, 0.0], &clips);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }
}

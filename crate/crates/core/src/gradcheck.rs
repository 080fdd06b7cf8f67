//! Finite-difference verification of every loss term's parameter gradients.
//!
//! Each term is differentiated on the tape once, then every parameter entry
//! is nudged by `±STEP` and the batch objective is re-evaluated with all
//! discrete choices (matchings, top-K sets, margin pairs, negative partners)
//! and the detached distillation target frozen to the values of the base
//! point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::loss_bce;
use crate::autograd::{Tape, Var};
use crate::data::{generate_synthetic, DatasetRecord, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{BatchLosses, Model, StepPlan};
use crate::nn::{Ctx, ParamId};
use crate::tensor::Matrix;
use crate::types::{AttentionVariant, Components, LossWeights, ModelConfig};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTerm {
    Bce,
    Ortho,
    Align,
    Distill,
    MomentRetrieval,
    Margin,
    RankContrastive,
    NegativePair,
}

impl GradTerm {
    pub const ALL: [GradTerm; 8] = [
        GradTerm::Bce,
        GradTerm::Ortho,
        GradTerm::Align,
        GradTerm::Distill,
        GradTerm::MomentRetrieval,
        GradTerm::Margin,
        GradTerm::RankContrastive,
        GradTerm::NegativePair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTerm::Bce => "bce",
            GradTerm::Ortho => "ortho",
            GradTerm::Align => "align",
            GradTerm::Distill => "distill",
            GradTerm::MomentRetrieval => "moment_retrieval",
            GradTerm::Margin => "margin",
            GradTerm::RankContrastive => "rank_contrastive",
            GradTerm::NegativePair => "negative_pair",
        }
    }

    /// Scalar node of this term. The highlight terms sum the saliency-score
    /// and correspondence versions.
    fn node(self, tape: &mut Tape, l: &BatchLosses) -> Option<Var> {
        let sum = |tape: &mut Tape, vs: Vec<Var>| -> Option<Var> {
            let mut it = vs.into_iter();
            let first = it.next()?;
            Some(it.fold(first, |a, b| tape.add(a, b)))
        };
        match self {
            GradTerm::Bce => l.terms.bce,
            GradTerm::Ortho => l.terms.ortho,
            GradTerm::Align => l.terms.align,
            GradTerm::Distill => l.terms.distill,
            GradTerm::MomentRetrieval => l.terms.mr,
            GradTerm::Margin => {
                let vs = l.instances.iter().flat_map(|i| [Some(i.hl.margin), i.attn.map(|a| a.margin)]).flatten().collect();
                sum(tape, vs)
            }
            GradTerm::RankContrastive => {
                let vs = l.instances.iter().flat_map(|i| [Some(i.hl.rank), i.attn.map(|a| a.rank)]).flatten().collect();
                sum(tape, vs)
            }
            GradTerm::NegativePair => {
                let vs = l
                    .instances
                    .iter()
                    .flat_map(|i| [i.hl.negative, i.attn.and_then(|a| a.negative)])
                    .flatten()
                    .collect();
                sum(tape, vs)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: GradTerm,
    pub value: f64,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Parameter entry with the largest error, as `name[index]`.
    pub worst: String,
    pub failures: usize,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.entries > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandCheck {
    /// Correspondence at the all-zero parameter point.
    pub a_bar: f64,
    pub max_abs_err: f64,
}

impl HandCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_err <= 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub terms: Vec<TermReport>,
    pub bce_hand: HandCheck,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(TermReport::passed) && self.bce_hand.passed()
    }

    pub fn failures(&self) -> Vec<GradTerm> {
        self.terms.iter().filter(|t| !t.passed()).map(|t| t.term).collect()
    }
}

/// Probe configuration: `h = 8`, two dummies, three pool candidates.
pub fn probe_config() -> ModelConfig {
    ModelConfig {
        video_dim: 6,
        text_dim: 5,
        hidden: 8,
        n_heads: 2,
        ff_dim: 16,
        num_dummies: 2,
        pool_size: 3,
        top_k: 1,
        n_moment_queries: 3,
        enc_layers: 1,
        dec_layers: 1,
        aca_layers: 1,
        dummy_enc_layers: 1,
        moment_enc_layers: 1,
        sentence_enc_layers: 1,
        attention_variant: AttentionVariant::Aca,
        components: Components::full(),
        dropout: 0.0,
        ..Default::default()
    }
}

/// Two pairs on different videos with 4 clips and 3 words each.
pub fn probe_batch(cfg: &ModelConfig, seed: u64) -> Result<Vec<DatasetRecord>> {
    let spec = SynthSpec {
        seed,
        n_pairs: 2,
        num_clips: 4,
        feature_dim: cfg.video_dim.max(cfg.text_dim),
        n_concepts: 6,
        words_per_query: [2, 2],
        moment_fraction: [0.5, 0.5],
        noise_in: 0.3,
        ..Default::default()
    };
    let mut recs = generate_synthetic(&spec)?;
    for r in &mut recs {
        let f = &mut r.features;
        f.clips = f.clips.slice_cols(0, cfg.video_dim);
        f.words = f.words.slice_cols(0, cfg.text_dim);
    }
    Ok(recs)
}

/// Runs the check on the probe configuration.
pub fn gradcheck(seed: u64) -> Result<GradReport> {
    let cfg = probe_config();
    let batch = probe_batch(&cfg, seed)?;
    let mut model = Model::new(cfg, seed)?;
    jitter(&mut model, seed, 0.05);
    gradcheck_with(&model, &batch, &LossWeights::default(), |_, _| {})
}

/// Runs the check on `model` and `batch`; `tweak` may alter each term's
/// analytic gradients before comparison (used to test the harness itself).
pub fn gradcheck_with(
    model: &Model,
    batch: &[DatasetRecord],
    weights: &LossWeights,
    tweak: impl Fn(GradTerm, &mut [(ParamId, Matrix)]),
) -> Result<GradReport> {
    if batch.len() < 2 {
        return Err(Error::config("gradient check needs two pairs for the batch-level terms"));
    }
    let refs: Vec<&DatasetRecord> = batch.iter().collect();
    let n = refs.len();
    let base_plan = StepPlan {
        negatives: (0..n).map(|b| Some((b + 1) % n)).collect(),
        margin_pairs: refs.iter().map(|r| first_margin_pair(&r.gt.saliency)).collect(),
        ..Default::default()
    };

    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&model.store);
    let losses = model.batch_objective(&mut tape, &mut ctx, &refs, weights, &base_plan)?;
    let plan = losses.plan.clone();
    let mut analytic = Vec::new();
    for term in GradTerm::ALL {
        let node = term
            .node(&mut tape, &losses)
            .ok_or_else(|| Error::config(format!("term {} is inactive at the probe point", term.name())))?;
        let mut grads = tape.backward(node).into_param_grads(&tape);
        tweak(term, &mut grads);
        let mut dense: Vec<Matrix> =
            model.store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        for (id, g) in grads {
            dense[id.index()] = g;
        }
        analytic.push((term, tape.scalar(node), dense));
    }

    let eval_terms = |m: &Model| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&m.store);
        let l = m.batch_objective(&mut tape, &mut ctx, &refs, weights, &plan)?;
        GradTerm::ALL
            .iter()
            .map(|t| t.node(&mut tape, &l).map(|v| tape.scalar(v)).ok_or_else(|| Error::config("term vanished")))
            .collect()
    };

    let mut probe = model.clone();
    let mut reports: Vec<TermReport> = analytic
        .iter()
        .map(|(term, value, _)| TermReport {
            term: *term,
            value: *value,
            entries: 0,
            max_rel_err: 0.0,
            worst: String::new(),
            failures: 0,
        })
        .collect();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for i in 0..model.store.value(id).len() {
            let x0 = model.store.value(id).data()[i];
            probe.store.value_mut(id).data_mut()[i] = x0 + STEP;
            let plus = eval_terms(&probe)?;
            probe.store.value_mut(id).data_mut()[i] = x0 - STEP;
            let minus = eval_terms(&probe)?;
            probe.store.value_mut(id).data_mut()[i] = x0;
            for (k, (_, _, dense)) in analytic.iter().enumerate() {
                let a = dense[id.index()].data()[i];
                let num = (plus[k] - minus[k]) / (2.0 * STEP);
                let err = relative_error(a, num);
                let r = &mut reports[k];
                r.entries += 1;
                if err > TOLERANCE {
                    r.failures += 1;
                }
                if err > r.max_rel_err || r.worst.is_empty() {
                    r.max_rel_err = r.max_rel_err.max(err);
                    r.worst = format!("{}[{i}]", model.store.name(id));
                }
            }
        }
    }
    Ok(GradReport { terms: reports, bce_hand: bce_hand_check(batch)? })
}

/// Adds `N(0, std²)` to every parameter. Zero-initialized layers (the span
/// output) otherwise place every prediction at `(0.5, 0.5)`, on the kinks of
/// the L1 and gIoU losses.
pub fn jitter(model: &mut Model, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for id in model.store.ids().collect::<Vec<_>>() {
        for x in model.store.value_mut(id).data_mut() {
            *x += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// `|a - n| / max(|a|, |n|, SCALE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
    let e = (analytic - numeric).abs() / scale;
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// First (higher, lower) clip pair in index order, so the probe is fixed.
fn first_margin_pair(saliency: &[u8]) -> Option<(usize, usize)> {
    for (i, &a) in saliency.iter().enumerate() {
        for (j, &b) in saliency.iter().enumerate() {
            if a > b {
                return Some((i, j));
            }
        }
    }
    None
}

/// With every parameter at zero all attention logits vanish, so each clip
/// spreads its weight evenly over `L_q + L_d` keys and `ā = L_q / (L_q + L_d)`.
/// The BCE gradient with respect to `ā` must then equal
/// `(ā - a) / (ā (1 - ā)) / L_v` exactly.
fn bce_hand_check(batch: &[DatasetRecord]) -> Result<HandCheck> {
    let cfg = probe_config();
    let mut model = Model::new(cfg.clone(), 0)?;
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.value_mut(id).data_mut().fill(0.0);
    }
    let rec = &batch[0];
    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&model.store);
    let f = &rec.features;
    let out = model.forward_pair(&mut tape, &mut ctx, &f.clips, &f.words, false, None)?;
    let a = out.a_bar.expect("cross-attention is on");
    let loss = loss_bce(&mut tape, a, &rec.gt.relevance)?;
    let g = tape.backward(loss).wrt_or_zeros(&tape, a);
    let n_q = f.words.rows() as f64;
    let expect_a = n_q / (n_q + cfg.num_dummies as f64);
    let l_v = f.clips.rows() as f64;
    let mut err: f64 = 0.0;
    for (i, (&ai, &gi)) in tape.value(a).data().iter().zip(g.data()).enumerate() {
        let target = if rec.gt.relevance[i] { 1.0 } else { 0.0 };
        let hand = (expect_a - target) / (expect_a * (1.0 - expect_a)) / l_v;
        err = err.max((ai - expect_a).abs()).max((gi - hand).abs());
    }
    Ok(HandCheck { a_bar: expect_a, max_abs_err: err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scales_and_floors() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
        assert_eq!(relative_error(f64::NAN, 0.0), f64::INFINITY);
    }

    #[test]
    fn margin_pair_is_first_ordered_pair() {
        assert_eq!(first_margin_pair(&[0, 3, 1]), Some((1, 0)));
        assert_eq!(first_margin_pair(&[2, 2]), None);
    }

    #[test]
    fn hand_bce_gradient_matches() {
        let batch = probe_batch(&probe_config(), 3).unwrap();
        let h = bce_hand_check(&batch).unwrap();
        assert!((h.a_bar - 0.6).abs() < 1e-15);
        assert!(h.passed(), "{h:?}");
    }
}

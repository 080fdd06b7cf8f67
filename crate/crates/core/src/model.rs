//! The full model: input projections, video-text fusion, correlation
//! learner, saliency token, encoder and decoder, and the batch objective.

use crate::attention::{
    adaptive_cross_attention, encode_dummies, loss_bce, loss_ortho, AttentionRecord, DummyBank,
};
use crate::autograd::{Tape, Var};
use crate::correlation::{
    build_textual_prototypes, build_visual_prototypes, guidance_map, loss_align, loss_distill, AlignItem,
    CorrelationLearner,
};
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::heads::{decoded_spans, loss_mr, match_predictions, Decoder, DecoderOutput, Encoder, MrLoss};
use crate::nn::{sinusoidal_positions, CrossBlock, Ctx, Init, Linear, ParamId, ParamStore, SelfBlock};
use crate::objectives::{loss_hd, total_loss_var, HdLoss, LossParts, LossVars, NegativeForm, RankLevels};
use crate::saliency::{build_saliency_token, candidate_weights, context_token, top_k_indices, CandidatePool};
use crate::tensor::Matrix;
use crate::types::{AttentionVariant, LossWeights, ModelConfig, Prediction};

/// Parameters and module layout. The layout is a pure function of the
/// configuration; the seed only affects initial values.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub video_proj: Linear,
    pub text_proj: Linear,
    pub modality: Option<[ParamId; 2]>,
    pub dummies: Option<DummyBank>,
    pub aca: Vec<CrossBlock>,
    /// Self-attention over `[clips; words]`, used instead of cross-attention.
    pub fusion: Vec<SelfBlock>,
    /// Query projection for saliency when there is no cross-attention to share it with.
    pub saliency_proj: Option<Linear>,
    pub ccl: Option<CorrelationLearner>,
    pub pool: Option<CandidatePool>,
    /// Learnable saliency token used when the adaptive token is disabled.
    pub plain_token: Option<ParamId>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let (h, heads, ff) = (cfg.hidden, cfg.n_heads, cfg.ff_dim);
        let c = cfg.components;
        let video_proj = Linear::new(&mut init, "video_proj", cfg.video_dim, h);
        let text_proj = Linear::new(&mut init, "text_proj", cfg.text_dim, h);
        let modality = cfg.modality_embedding.then(|| {
            [init.normal("modality.video", 1, h, 0.02), init.normal("modality.text", 1, h, 0.02)]
        });
        let dummies = cfg
            .uses_dummies()
            .then(|| DummyBank::new(&mut init, cfg.num_dummies, h, heads, ff, cfg.effective_dummy_enc_layers()));
        let (aca, fusion) = if c.cross_attention {
            let aca = (0..cfg.aca_layers).map(|l| CrossBlock::new(&mut init, &format!("aca{l}"), h, heads, ff)).collect();
            (aca, Vec::new())
        } else {
            let fusion =
                (0..cfg.aca_layers.max(1)).map(|l| SelfBlock::new(&mut init, &format!("fusion{l}"), h, heads, ff)).collect();
            (Vec::new(), fusion)
        };
        let saliency_proj = (!c.cross_attention).then(|| Linear::new(&mut init, "saliency_proj", h, h));
        let ccl = c.correlation_learner.then(|| {
            CorrelationLearner::new(&mut init, h, heads, ff, cfg.moment_enc_layers, cfg.sentence_enc_layers)
        });
        let (pool, plain_token) = if c.saliency_detector {
            (Some(CandidatePool::new(&mut init, cfg.pool_size, h)), None)
        } else {
            (None, Some(init.normal("saliency_token", 1, h, 1.0)))
        };
        let encoder = Encoder::new(&mut init, h, heads, ff, cfg.enc_layers);
        let decoder = Decoder::new(&mut init, h, heads, ff, cfg.dec_layers, cfg.n_moment_queries);
        Ok(Self {
            cfg,
            store,
            video_proj,
            text_proj,
            modality,
            dummies,
            aca,
            fusion,
            saliency_proj,
            ccl,
            pool,
            plain_token,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the layout for `cfg` around an existing parameter store,
    /// checking that names and shapes agree.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, configuration expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for ((_, a), (_, b)) in model.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    /// Projection shared by the cross-attention queries and saliency scoring.
    pub fn query_projection(&self) -> &Linear {
        match &self.saliency_proj {
            Some(p) => p,
            None => &self.aca[0].attn.q,
        }
    }

    fn project(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, proj: &Linear, x: &Matrix, slot: usize) -> Var {
        let x = tape.constant(x.clone());
        let mut y = proj.forward(tape, ctx, x);
        if let Some(m) = self.modality {
            let m = ctx.p(tape, m[slot]);
            y = tape.add_row(y, m);
        }
        ctx.dropout(tape, y)
    }

    /// Forward pass of one video-query pair up to saliency scores, and the
    /// decoder when `decode` is set.
    pub fn forward_pair(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        clips: &Matrix,
        words: &Matrix,
        decode: bool,
        fixed_top_k: Option<&[usize]>,
    ) -> Result<PairVars> {
        if words.rows() == 0 {
            return Err(Error::EmptyQuery);
        }
        if clips.cols() != self.cfg.video_dim || words.cols() != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "features are {}/{} wide, model expects {}/{}",
                clips.cols(),
                words.cols(),
                self.cfg.video_dim,
                self.cfg.text_dim
            )));
        }
        let n_clips = clips.rows();
        let n_text = words.rows();
        let v = self.project(tape, ctx, &self.video_proj, clips, 0);
        let w = self.project(tape, ctx, &self.text_proj, words, 1);

        let dummies = match &self.dummies {
            Some(bank) => Some(encode_dummies(tape, ctx, bank, self.cfg.effective_dummy_enc_layers(), w)?),
            None => None,
        };
        let mut layers: Vec<AttentionRecord> = Vec::new();
        let mut layer_probs = Vec::new();
        let fused = if self.cfg.components.cross_attention {
            let mut x = v;
            for block in &self.aca {
                let rec = adaptive_cross_attention(tape, ctx, block, x, w, dummies, self.cfg.attention_variant)?;
                x = rec.fused;
                layers.push(rec);
            }
            layer_probs = layers.iter().map(|r| r.probs).collect();
            x
        } else {
            let mut x = tape.concat_rows(&[v, w]);
            for block in &self.fusion {
                x = block.forward(tape, ctx, x, None);
            }
            tape.slice_rows(x, 0, n_clips)
        };
        let (weights, a_bar) = average_layers(tape, &layers);

        let (token, msd) = match &self.pool {
            Some(pool) => {
                let a = match a_bar {
                    Some(a) => a,
                    None => tape.constant(Matrix::filled(n_clips, 1, 1.0)),
                };
                let context = context_token(tape, fused);
                let p = ctx.p(tape, pool.pool);
                let c = candidate_weights(tape, fused, context, p, a);
                let idx = match fixed_top_k {
                    Some(idx) => idx.to_vec(),
                    None => top_k_indices(tape.value(c).data(), self.cfg.top_k),
                };
                let t = build_saliency_token(tape, context, p, c, &idx);
                (t, Some(MsdVars { weights: c, top_k: idx }))
            }
            None => (ctx.p(tape, self.plain_token.expect("plain token without adaptive token")), None),
        };

        let h = self.cfg.hidden;
        let clip_pos = sinusoidal_positions(n_clips, h);
        let mut pos = Matrix::zeros(n_clips + 1, h);
        pos.data_mut()[h..].copy_from_slice(clip_pos.data());
        let pos = tape.constant(pos);
        let seq = tape.concat_rows(&[token, fused]);
        let enc = self.encoder.forward(tape, ctx, seq, pos);
        let t_enc = tape.slice_rows(enc, 0, 1);
        let v_enc = tape.slice_rows(enc, 1, n_clips);
        let saliency = crate::saliency::saliency_scores(tape, ctx, self.query_projection(), t_enc, v_enc);
        let decoder = decode.then(|| {
            let mem_pos = tape.constant(clip_pos);
            self.decoder.forward(tape, ctx, v_enc, mem_pos)
        });
        let out = PairVars {
            clips: v,
            words: w,
            dummies,
            weights,
            a_bar,
            layer_probs,
            n_text,
            token,
            msd,
            saliency,
            decoder,
        };
        if cfg!(debug_assertions) {
            out.check_invariants(tape, self.cfg.attention_variant)?;
        }
        Ok(out)
    }

    /// Prediction for one record in evaluation mode.
    pub fn predict(&self, record: &DatasetRecord) -> Result<(Prediction, PairSummary)> {
        let mut ctx = Ctx::eval(&self.store);
        let mut tape = Tape::new();
        let f = &record.features;
        let out = self.forward_pair(&mut tape, &mut ctx, &f.clips, &f.words, true, None)?;
        let dec = out.decoder.expect("decoder requested");
        let (spans, probs) = decoded_spans(&tape, &dec);
        let saliency = tape.value(out.saliency).data().to_vec();
        let pred = Prediction::new(
            f.query_id.clone(),
            f.video_id.clone(),
            record.duration_s,
            spans.into_iter().zip(probs).collect(),
            saliency,
        );
        let summary = PairSummary {
            a_bar: out.a_bar.map(|a| tape.value(a).data().to_vec()),
            weights: out.weights.map(|w| tape.value(w).clone()),
            candidate_weights: out.msd.as_ref().map(|m| tape.value(m.weights).data().to_vec()),
            top_k: out.msd.map(|m| m.top_k),
            token: tape.value(out.token).data().to_vec(),
        };
        Ok((pred, summary))
    }

    /// Objective of one mini-batch on a shared tape.
    ///
    /// `plan` fixes every discrete choice (negative partners, margin pairs
    /// and optionally matchings and top-K sets) so the objective is a smooth
    /// function of the parameters; the choices actually used are returned.
    pub fn batch_objective(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        batch: &[&DatasetRecord],
        weights: &LossWeights,
        plan: &StepPlan,
    ) -> Result<BatchLosses> {
        let c = self.cfg.components;
        let mut instances = Vec::with_capacity(batch.len());
        let mut align_items = Vec::new();
        let mut used = StepPlan { negatives: plan.negatives.clone(), margin_pairs: plan.margin_pairs.clone(), ..Default::default() };
        for (b, rec) in batch.iter().enumerate() {
            let f = &rec.features;
            let fixed_k = plan.top_k.as_ref().map(|t| t[b].as_slice());
            let out = self.forward_pair(tape, ctx, &f.clips, &f.words, true, fixed_k)?;
            let neg = match plan.negatives.get(b).copied().flatten() {
                Some(j) => {
                    if batch[j].features.video_id == f.video_id {
                        return Err(Error::config("negative pair drawn from the same video"));
                    }
                    let k = out.msd.as_ref().map(|m| m.top_k.as_slice());
                    let k = plan.negative_top_k.as_ref().map(|t| t[b].as_slice()).or(k);
                    Some(self.forward_pair(tape, ctx, &f.clips, &batch[j].features.words, false, k)?)
                }
                None => None,
            };
            used.top_k.get_or_insert_with(Vec::new).push(out.msd.as_ref().map(|m| m.top_k.clone()).unwrap_or_default());
            used.negative_top_k
                .get_or_insert_with(Vec::new)
                .push(neg.as_ref().and_then(|n| n.msd.as_ref().map(|m| m.top_k.clone())).unwrap_or_default());

            let dec = out.decoder.expect("decoder requested");
            let matching = match &plan.matchings {
                Some(m) => m[b].clone(),
                None => {
                    let (spans, probs) = decoded_spans(tape, &dec);
                    match_predictions(&spans, &probs, &rec.gt.spans, weights)?
                }
            };
            let mr = loss_mr(tape, &dec, &matching, &rec.gt.spans, weights);
            used.matchings.get_or_insert_with(Vec::new).push(matching);

            let levels = RankLevels::new(&rec.gt.saliency);
            let pair = plan.margin_pairs.get(b).copied().flatten();
            let hl = loss_hd(tape, out.saliency, neg.as_ref().map(|n| n.saliency), &levels, pair, weights, NegativeForm::Logistic)?;
            let (attn, bce, ortho) = if c.dummy_losses && c.cross_attention {
                let a = out.a_bar.expect("cross-attention yields correspondence");
                let neg_a = neg.as_ref().and_then(|n| n.a_bar);
                let attn = loss_hd(tape, a, neg_a, &levels, pair, weights, NegativeForm::Probability)?;
                let bce = loss_bce(tape, a, &rec.gt.relevance)?;
                let ortho = out.dummies.map(|d| loss_ortho(tape, d));
                (Some(attn), Some(bce), ortho)
            } else {
                (None, None, None)
            };

            let mut guidance = None;
            let distill = match &self.ccl {
                Some(ccl) => {
                    let vis = build_visual_prototypes(tape, ctx, ccl, out.clips, &rec.gt.relevance)?;
                    let txt = build_textual_prototypes(tape, ctx, ccl, out.words, out.dummies)?;
                    align_items.push(AlignItem {
                        m_pos: vis.pos.map(|p| p.token),
                        m_neg: vis.neg.map(|p| p.token),
                        s_pos: Some(txt.pos.token),
                        s_neg: txt.neg.map(|p| p.token),
                    });
                    match (vis.pos, out.weights) {
                        (Some(vp), Some(w)) if self.distillable() => {
                            let g = match plan.guidance.as_ref().and_then(|g| g[b].clone()) {
                                Some(g) => g,
                                None => {
                                    let d_hat =
                                        if self.cfg.active_dummies() > 0 { txt.neg.map(|p| p.projected) } else { None };
                                    guidance_map(
                                        tape.value(vp.projected),
                                        tape.value(txt.pos.projected),
                                        d_hat.map(|d| tape.value(d)),
                                    )
                                }
                            };
                            if cfg!(debug_assertions) {
                                check_rows_stochastic(&g, "guidance")?;
                            }
                            let loss = loss_distill(tape, w, &g, &rec.gt.relevance, self.cfg.distill_normalizer)?;
                            guidance = Some(g);
                            Some(loss)
                        }
                        _ => None,
                    }
                }
                None => None,
            };
            used.guidance.get_or_insert_with(Vec::new).push(guidance);
            instances.push(InstanceLosses { mr, hl, attn, bce, ortho, distill });
        }

        let align = if c.correlation_learner { Some(loss_align(tape, &align_items, weights.tau_align)?) } else { None };

        let inv = 1.0 / batch.len() as f64;
        let mut sums = LossVars::default();
        let acc = |tape: &mut Tape, slot: &mut Option<Var>, v: Option<Var>| {
            if let Some(v) = v {
                let s = tape.scale(v, inv);
                *slot = Some(match *slot {
                    Some(prev) => tape.add(prev, s),
                    None => s,
                });
            }
        };
        for inst in &instances {
            acc(tape, &mut sums.mr, Some(inst.mr.total));
            acc(tape, &mut sums.hl, Some(inst.hl.total));
            acc(tape, &mut sums.attn, inst.attn.map(|a| a.total));
            acc(tape, &mut sums.bce, inst.bce);
            acc(tape, &mut sums.ortho, inst.ortho);
            acc(tape, &mut sums.distill, inst.distill);
        }
        sums.align = align;
        let total = total_loss_var(tape, &sums, weights);
        let parts = sums.values(tape);
        Ok(BatchLosses { instances, align, terms: sums, total, parts, plan: used })
    }

    /// Distillation needs row-stochastic attention over the same keys as the guidance.
    fn distillable(&self) -> bool {
        matches!(self.cfg.attention_variant, AttentionVariant::Aca | AttentionVariant::PlainSoftmax)
    }
}

/// Mean of head-averaged weights and of `ā` over cross-attention layers.
fn average_layers(tape: &mut Tape, layers: &[AttentionRecord]) -> (Option<Var>, Option<Var>) {
    if layers.is_empty() {
        return (None, None);
    }
    let inv = 1.0 / layers.len() as f64;
    let mut w = layers[0].weights;
    let mut a = layers[0].a_bar;
    for r in &layers[1..] {
        w = tape.add(w, r.weights);
        a = tape.add(a, r.a_bar);
    }
    if layers.len() > 1 {
        w = tape.scale(w, inv);
        a = tape.scale(a, inv);
    }
    (Some(w), Some(a))
}

fn check_rows_stochastic(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || m.row(r).iter().any(|&x| x < 0.0) {
            return Err(Error::Numerics(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MsdVars {
    pub weights: Var,
    pub top_k: Vec<usize>,
}

/// Nodes produced by one pair's forward pass.
#[derive(Clone, Debug)]
pub struct PairVars {
    /// Projected clip features.
    pub clips: Var,
    /// Projected word features.
    pub words: Var,
    pub dummies: Option<Var>,
    /// Layer-averaged head-mean attention, `L_v × (L_q + active dummies)`.
    pub weights: Option<Var>,
    pub a_bar: Option<Var>,
    pub layer_probs: Vec<Var>,
    pub n_text: usize,
    pub token: Var,
    pub msd: Option<MsdVars>,
    pub saliency: Var,
    pub decoder: Option<DecoderOutput>,
}

impl PairVars {
    /// Row sums of per-head weights for normalized variants and `ā ∈ [0, 1]`.
    pub fn check_invariants(&self, tape: &Tape, variant: AttentionVariant) -> Result<()> {
        if matches!(variant, AttentionVariant::Aca | AttentionVariant::PlainSoftmax) {
            for &p in &self.layer_probs {
                check_rows_stochastic(tape.value(p), "attention")?;
            }
        }
        if let Some(a) = self.a_bar {
            if let Some(bad) = tape.value(a).data().iter().find(|&&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) {
                return Err(Error::Numerics(format!("correspondence {bad} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Values of one evaluation pass kept for analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSummary {
    pub a_bar: Option<Vec<f64>>,
    pub weights: Option<Matrix>,
    pub candidate_weights: Option<Vec<f64>>,
    pub top_k: Option<Vec<usize>>,
    pub token: Vec<f64>,
}

/// Discrete choices of one optimization step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    /// Batch index whose query forms this instance's negative pair.
    pub negatives: Vec<Option<usize>>,
    pub margin_pairs: Vec<Option<(usize, usize)>>,
    /// `(prediction, target)` pairs per instance; computed when absent.
    pub matchings: Option<Vec<Vec<(usize, usize)>>>,
    /// Saliency-token candidates per instance; computed when absent.
    pub top_k: Option<Vec<Vec<usize>>>,
    pub negative_top_k: Option<Vec<Vec<usize>>>,
    /// Distillation targets per instance; computed when absent.
    pub guidance: Option<Vec<Option<Matrix>>>,
}

#[derive(Clone, Copy, Debug)]
pub struct InstanceLosses {
    pub mr: MrLoss,
    pub hl: HdLoss,
    pub attn: Option<HdLoss>,
    pub bce: Option<Var>,
    pub ortho: Option<Var>,
    pub distill: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BatchLosses {
    pub instances: Vec<InstanceLosses>,
    pub align: Option<Var>,
    /// Batch-mean loss nodes as combined into the total.
    pub terms: LossVars,
    pub total: Var,
    pub parts: LossParts,
    pub plan: StepPlan,
}

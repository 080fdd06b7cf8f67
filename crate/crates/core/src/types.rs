//! Shared domain types: features, spans, ground truth, predictions and the
//! model / loss configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Highest ground-truth saliency level (levels run `0..=SALIENCY_MAX`).
pub const SALIENCY_MAX: u8 = 4;

const SPAN_TOL: f64 = 1e-6;

/// Clip features of one video paired with token features of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub clips: Matrix,
    pub words: Matrix,
    pub video_id: String,
    pub query_id: String,
}

impl FeatureSequence {
    pub fn new(clips: Matrix, words: Matrix, video_id: impl Into<String>, query_id: impl Into<String>) -> Result<Self> {
        if clips.rows() == 0 {
            return Err(Error::Shape("video has no clips".into()));
        }
        if words.rows() == 0 {
            return Err(Error::EmptyQuery);
        }
        if !clips.is_finite() || !words.is_finite() {
            return Err(Error::Numerics("non-finite feature value".into()));
        }
        Ok(Self { clips, words, video_id: video_id.into(), query_id: query_id.into() })
    }

    pub fn num_clips(&self) -> usize {
        self.clips.rows()
    }

    pub fn num_words(&self) -> usize {
        self.words.rows()
    }
}

/// Moment as normalized `(center, width)`, both fractions of video duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub center: f64,
    pub width: f64,
}

impl MomentSpan {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(center.is_finite() && width.is_finite()) || width <= 0.0 || width > 1.0 + SPAN_TOL {
            return Err(Error::Range(format!("span width {width} outside (0, 1]")));
        }
        if center - width / 2.0 < -SPAN_TOL || center + width / 2.0 > 1.0 + SPAN_TOL {
            return Err(Error::Range(format!("span ({center}, {width}) leaves [0, 1]")));
        }
        Ok(Self { center, width })
    }

    /// `(start, end)` clamped to `[0, 1]`.
    pub fn to_start_end(self) -> (f64, f64) {
        let start = (self.center - self.width / 2.0).clamp(0.0, 1.0);
        let end = (self.center + self.width / 2.0).clamp(0.0, 1.0);
        (start, end)
    }

    pub fn from_start_end(start: f64, end: f64) -> Result<Self> {
        if !(start < end) {
            return Err(Error::InvalidSpan { start, end });
        }
        if start < -SPAN_TOL || end > 1.0 + SPAN_TOL {
            return Err(Error::Range(format!("span [{start}, {end}] leaves [0, 1]")));
        }
        Ok(Self { center: (start + end) / 2.0, width: end - start })
    }

    /// Span clamped into `[0, 1]`, used on raw network outputs.
    pub fn clamped(center: f64, width: f64) -> Self {
        let (s, e) = Self { center, width }.to_start_end();
        let e = if e - s < 1e-6 { (s + 1e-6).min(1.0) } else { e };
        let s = s.min(e - 1e-6);
        Self { center: (s + e) / 2.0, width: e - s }
    }

    /// Whether clip `i` of `num_clips` has its midpoint inside this span.
    pub fn contains_clip(self, i: usize, num_clips: usize) -> bool {
        let mid = (i as f64 + 0.5) / num_clips as f64;
        let (s, e) = self.to_start_end();
        mid >= s && mid <= e
    }
}

/// Plain interval IoU of two spans.
pub fn span_iou(a: MomentSpan, b: MomentSpan) -> f64 {
    let (s1, e1) = a.to_start_end();
    let (s2, e2) = b.to_start_end();
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ground truth of one video-query pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spans: Vec<MomentSpan>,
    pub saliency: Vec<u8>,
    pub relevance: Vec<bool>,
}

impl GroundTruth {
    /// Builds ground truth from per-clip saliency; relevance is `saliency > 0`.
    pub fn new(spans: Vec<MomentSpan>, saliency: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = saliency.iter().find(|&&s| s > SALIENCY_MAX) {
            return Err(Error::Range(format!("saliency level {bad} above {SALIENCY_MAX}")));
        }
        let relevance = saliency.iter().map(|&s| s > 0).collect();
        Ok(Self { spans, saliency, relevance })
    }

    /// Marks every clip whose midpoint lies in a span with saliency `level`.
    pub fn from_spans(spans: Vec<MomentSpan>, num_clips: usize, level: u8) -> Result<Self> {
        let saliency = (0..num_clips)
            .map(|i| if spans.iter().any(|s| s.contains_clip(i, num_clips)) { level } else { 0 })
            .collect();
        Self::new(spans, saliency)
    }

    pub fn num_clips(&self) -> usize {
        self.saliency.len()
    }

    pub fn positive_clips(&self) -> Vec<usize> {
        (0..self.relevance.len()).filter(|&i| self.relevance[i]).collect()
    }

    pub fn negative_clips(&self) -> Vec<usize> {
        (0..self.relevance.len()).filter(|&i| !self.relevance[i]).collect()
    }

    /// Clips inside a span that are nevertheless marked irrelevant.
    pub fn inconsistent_clips(&self) -> Vec<usize> {
        let n = self.num_clips();
        (0..n)
            .filter(|&i| !self.relevance[i] && self.spans.iter().any(|s| s.contains_clip(i, n)))
            .collect()
    }
}

/// Scored output for one video-query pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub video_id: String,
    pub duration_s: f64,
    /// Candidate spans with foreground confidence, highest confidence first.
    pub spans: Vec<(MomentSpan, f64)>,
    pub saliency: Vec<f64>,
}

impl Prediction {
    pub fn new(
        query_id: impl Into<String>,
        video_id: impl Into<String>,
        duration_s: f64,
        mut spans: Vec<(MomentSpan, f64)>,
        saliency: Vec<f64>,
    ) -> Self {
        spans.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { query_id: query_id.into(), video_id: video_id.into(), duration_s, spans, saliency }
    }

    pub fn top(&self) -> Option<MomentSpan> {
        self.spans.first().map(|s| s.0)
    }
}

/// How keys are normalized inside the video-to-text cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Softmax over text keys and encoded dummy keys.
    Aca,
    /// Softmax over text keys only.
    PlainSoftmax,
    /// Logistic weights over text keys.
    Sigmoid,
    /// Softmax with an implicit zero logit in the denominator.
    SoftmaxOne,
}

impl AttentionVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "aca" => Some(Self::Aca),
            "plain_softmax" => Some(Self::PlainSoftmax),
            "sigmoid" => Some(Self::Sigmoid),
            "softmax_one" => Some(Self::SoftmaxOne),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Aca => "aca",
            Self::PlainSoftmax => "plain_softmax",
            Self::Sigmoid => "sigmoid",
            Self::SoftmaxOne => "softmax_one",
        }
    }
}

/// Component switches behind the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Video-to-text cross-attention; when off, clips and words are fused by
    /// self-attention over their concatenation.
    pub cross_attention: bool,
    /// Learnable dummy keys in the cross-attention.
    pub dummy_tokens: bool,
    /// Query-conditioned dummy encoder.
    pub dummy_encoder: bool,
    /// Correspondence supervision (`L_attn`, `L_bce`, `L_ortho`).
    pub dummy_losses: bool,
    /// Clip-word correlation learner (`L_align`, `L_distill`).
    pub correlation_learner: bool,
    /// Moment-adaptive saliency token; otherwise a plain learnable token.
    pub saliency_detector: bool,
}

impl Components {
    pub const ROWS: [char; 7] = ['a', 'b', 'c', 'd', 'e', 'f', 'g'];

    /// Configuration of ablation row `a`..=`g`.
    pub fn row(row: char) -> Option<Self> {
        let level = Self::ROWS.iter().position(|&r| r == row)?;
        Some(Self {
            cross_attention: level >= 1,
            dummy_tokens: level >= 2,
            dummy_encoder: level >= 3,
            dummy_losses: level >= 4,
            correlation_learner: level >= 5,
            saliency_detector: level >= 6,
        })
    }

    pub fn full() -> Self {
        Self::row('g').expect("row g exists")
    }
}

/// Whether the distillation loss divides by all clips or positive clips only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillNormalizer {
    AllClips,
    PositiveClips,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub num_dummies: usize,
    pub pool_size: usize,
    pub top_k: usize,
    pub n_moment_queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub aca_layers: usize,
    pub dummy_enc_layers: usize,
    pub moment_enc_layers: usize,
    pub sentence_enc_layers: usize,
    pub attention_variant: AttentionVariant,
    pub components: Components,
    pub dropout: f64,
    pub modality_embedding: bool,
    pub distill_normalizer: DistillNormalizer,
}

impl Default for ModelConfig {
    /// Hyperparameters of the QVHighlights setting.
    fn default() -> Self {
        Self {
            video_dim: 2816,
            text_dim: 512,
            hidden: 256,
            n_heads: 8,
            ff_dim: 1024,
            num_dummies: 45,
            pool_size: 10,
            top_k: 1,
            n_moment_queries: 10,
            enc_layers: 3,
            dec_layers: 3,
            aca_layers: 2,
            dummy_enc_layers: 2,
            moment_enc_layers: 1,
            sentence_enc_layers: 1,
            attention_variant: AttentionVariant::Aca,
            components: Components::full(),
            dropout: 0.1,
            modality_embedding: true,
            distill_normalizer: DistillNormalizer::AllClips,
        }
    }
}

impl ModelConfig {
    /// Number of dummy keys that actually enter the cross-attention.
    pub fn active_dummies(&self) -> usize {
        if self.components.cross_attention
            && self.components.dummy_tokens
            && self.attention_variant == AttentionVariant::Aca
        {
            self.num_dummies
        } else {
            0
        }
    }

    /// Whether encoded dummy tokens are computed at all.
    pub fn uses_dummies(&self) -> bool {
        self.components.cross_attention && self.components.dummy_tokens
    }

    /// Dummy encoder depth after the component switches.
    pub fn effective_dummy_enc_layers(&self) -> usize {
        if self.components.dummy_encoder {
            self.dummy_enc_layers
        } else {
            0
        }
    }

    pub fn validate(self) -> Result<Self> {
        validate_config(self)
    }
}

/// Checks every structural invariant of `cfg`, reporting all violations.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    let mut errs = Vec::new();
    let positive = [
        ("video_dim", cfg.video_dim),
        ("text_dim", cfg.text_dim),
        ("hidden", cfg.hidden),
        ("n_heads", cfg.n_heads),
        ("ff_dim", cfg.ff_dim),
        ("num_dummies", cfg.num_dummies),
        ("pool_size", cfg.pool_size),
        ("top_k", cfg.top_k),
        ("n_moment_queries", cfg.n_moment_queries),
    ];
    for (name, v) in positive {
        if v == 0 {
            errs.push(format!("{name} must be positive"));
        }
    }
    if cfg.n_heads > 0 && cfg.hidden % cfg.n_heads != 0 {
        errs.push(format!("hidden {} is not divisible by n_heads {}", cfg.hidden, cfg.n_heads));
    }
    if cfg.top_k > cfg.pool_size {
        errs.push(format!("top_k {} exceeds pool_size {}", cfg.top_k, cfg.pool_size));
    }
    if cfg.components.cross_attention && cfg.aca_layers == 0 {
        errs.push("cross-attention enabled but aca_layers is 0".into());
    }
    if cfg.components.correlation_learner && (cfg.moment_enc_layers == 0 || cfg.sentence_enc_layers == 0) {
        errs.push("correlation learner needs moment_enc_layers and sentence_enc_layers >= 1".into());
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        errs.push(format!("dropout {} outside [0, 1)", cfg.dropout));
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

/// Weights of every term of the overall objective plus loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub hl: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub ortho: f64,
    pub align: f64,
    pub distill: f64,
    pub tau_align: f64,
    pub tau_rank: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hl: 1.0,
            l1: 10.0,
            giou: 1.0,
            ce: 4.0,
            ortho: 1.0,
            align: 1.0,
            distill: 1.0,
            tau_align: 0.1,
            tau_rank: 0.5,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(self) -> Result<Self> {
        let mut errs = Vec::new();
        let nonneg = [
            ("hl", self.hl),
            ("l1", self.l1),
            ("giou", self.giou),
            ("ce", self.ce),
            ("ortho", self.ortho),
            ("align", self.align),
            ("distill", self.distill),
            ("margin", self.margin),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                errs.push(format!("loss weight {name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [("tau_align", self.tau_align), ("tau_rank", self.tau_rank)] {
            if !v.is_finite() || v <= 0.0 {
                errs.push(format!("temperature {name} must be positive, got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }
}

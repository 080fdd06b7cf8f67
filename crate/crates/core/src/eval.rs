//! Moment-retrieval and highlight-detection metrics, plus the analysis of
//! how well query correspondence tracks ground-truth saliency.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{span_iou, GroundTruth, MomentSpan, Prediction, SALIENCY_MAX};

/// IoU thresholds of the averaged mAP: 0.5, 0.55, …, 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-query breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub qid: String,
    pub top1_iou: f64,
    pub map_avg: f64,
    /// Absent when the query has no clip at the positive threshold.
    pub hd_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r1_at_0_3: f64,
    pub r1_at_0_5: f64,
    pub r1_at_0_7: f64,
    pub map_at_0_5: f64,
    pub map_at_0_75: f64,
    pub map_avg: f64,
    pub miou: f64,
    pub hd_map: f64,
    pub hit1: f64,
    pub queries: Vec<QueryDetail>,
}

impl MetricReport {
    /// Scalar fields in display order, for tables.
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("r1@0.3", self.r1_at_0_3),
            ("r1@0.5", self.r1_at_0_5),
            ("r1@0.7", self.r1_at_0_7),
            ("map@0.5", self.map_at_0_5),
            ("map@0.75", self.map_at_0_75),
            ("map_avg", self.map_avg),
            ("miou", self.miou),
            ("hd_map", self.hd_map),
            ("hit1", self.hit1),
        ]
    }
}

fn best_iou(span: MomentSpan, gts: &[MomentSpan]) -> f64 {
    gts.iter().map(|&g| span_iou(span, g)).fold(0.0, f64::max)
}

/// Fraction of queries whose top span reaches `threshold` IoU with some
/// ground-truth span.
pub fn recall_at_1(preds: &[Prediction], gts: &[GroundTruth], threshold: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.top().is_some_and(|s| best_iou(s, &g.spans) >= threshold))
        .count();
    hits as f64 / preds.len() as f64
}

/// Mean over queries of the best IoU reached by the top span.
pub fn miou(preds: &[Prediction], gts: &[GroundTruth]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| p.top().map_or(0.0, |s| best_iou(s, &g.spans))).sum();
    total / preds.len() as f64
}

/// Average precision of a ranked hit list against `n_pos` positives, with
/// precision made monotone from the right before integrating over recall.
pub fn average_precision(hits: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    hits.iter().zip(&precision).filter(|(h, _)| **h).map(|(_, p)| p).sum::<f64>() / n_pos as f64
}

/// Greedy one-to-one matching of ranked spans to ground truth at one IoU
/// threshold; each prediction takes the best still-unmatched span.
pub fn detection_hits(ranked: &[MomentSpan], gts: &[MomentSpan], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|&p| {
            let best = (0..gts.len())
                .filter(|&g| !used[g])
                .map(|g| (g, span_iou(p, gts[g])))
                .filter(|&(_, iou)| iou >= threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Detection AP of one query at one threshold.
pub fn query_ap(pred: &Prediction, gt: &GroundTruth, threshold: f64) -> f64 {
    let ranked: Vec<MomentSpan> = pred.spans.iter().map(|s| s.0).collect();
    average_precision(&detection_hits(&ranked, &gt.spans, threshold), gt.spans.len())
}

/// Per-threshold mAP (mean over queries) and its average over thresholds.
pub fn map_moments(preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> (Vec<f64>, f64) {
    if preds.is_empty() || thresholds.is_empty() {
        return (vec![0.0; thresholds.len()], 0.0);
    }
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| preds.iter().zip(gts).map(|(p, g)| query_ap(p, g, t)).sum::<f64>() / preds.len() as f64)
        .collect();
    let avg = per.iter().sum::<f64>() / per.len() as f64;
    (per, avg)
}

/// Clip order by descending score, ties by index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Saliency AP of one query, or `None` without positive clips.
pub fn highlight_ap(scores: &[f64], saliency: &[u8], positive_level: u8) -> Option<f64> {
    let n_pos = saliency.iter().filter(|&&s| s >= positive_level).count();
    if n_pos == 0 {
        return None;
    }
    let hits: Vec<bool> = ranking(scores).iter().map(|&i| saliency[i] >= positive_level).collect();
    Some(average_precision(&hits, n_pos))
}

/// Highlight mAP and HIT@1 over queries that have positive clips.
pub fn hd_metrics(preds: &[Prediction], gts: &[GroundTruth], positive_level: u8) -> (f64, f64) {
    let mut aps = Vec::new();
    let mut hits = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if let Some(ap) = highlight_ap(&p.saliency, &g.saliency, positive_level) {
            aps.push(ap);
            if ranking(&p.saliency).first().is_some_and(|&i| g.saliency[i] >= positive_level) {
                hits += 1;
            }
        }
    }
    if aps.is_empty() {
        return (0.0, 0.0);
    }
    (aps.iter().sum::<f64>() / aps.len() as f64, hits as f64 / aps.len() as f64)
}

/// Full report. `positive_level` marks highlight clips (default 4).
pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth], positive_level: u8) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} queries", preds.len(), gts.len())));
    }
    if positive_level == 0 || positive_level > SALIENCY_MAX {
        return Err(Error::Range(format!("positive level {positive_level} outside 1..={SALIENCY_MAX}")));
    }
    let thresholds = map_thresholds();
    let (_, map_avg) = map_moments(preds, gts, &thresholds);
    let (at, _) = map_moments(preds, gts, &[0.5, 0.75]);
    let (hd_map, hit1) = hd_metrics(preds, gts, positive_level);
    let queries = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| QueryDetail {
            qid: p.query_id.clone(),
            top1_iou: p.top().map_or(0.0, |s| best_iou(s, &g.spans)),
            map_avg: thresholds.iter().map(|&t| query_ap(p, g, t)).sum::<f64>() / thresholds.len() as f64,
            hd_ap: highlight_ap(&p.saliency, &g.saliency, positive_level),
        })
        .collect();
    Ok(MetricReport {
        r1_at_0_3: recall_at_1(preds, gts, 0.3),
        r1_at_0_5: recall_at_1(preds, gts, 0.5),
        r1_at_0_7: recall_at_1(preds, gts, 0.7),
        map_at_0_5: at[0],
        map_at_0_75: at[1],
        map_avg,
        miou: miou(preds, gts),
        hd_map,
        hit1,
        queries,
    })
}

// ---- correspondence alignment --------------------------------------------

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean per-query mAP of the bin; `None` for empty bins.
    pub mean_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentAnalysis {
    pub bins: Vec<AlignmentBin>,
    /// Queries whose correspondence or saliency vector had zero norm.
    pub skipped: usize,
}

impl AlignmentAnalysis {
    /// Mean mAP of the lowest and highest occupied bins.
    pub fn extreme_bins(&self) -> Option<(f64, f64)> {
        let occupied: Vec<f64> = self.bins.iter().filter_map(|b| b.mean_map).collect();
        Some((*occupied.first()?, *occupied.last()?))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count,mean_map\n");
        for b in &self.bins {
            let m = b.mean_map.map_or("nan".to_string(), |m| format!("{m}"));
            writeln!(s, "{},{},{},{}", b.low, b.high, b.count, m).expect("writing to a String");
        }
        s
    }
}

/// Bins queries by the cosine between their correspondence vector and
/// ground-truth saliency (equal-width bins over the observed range) and
/// reports the mean per-query mAP in each bin.
pub fn correspondence_alignment_analysis(
    a_bars: &[Vec<f64>],
    saliency: &[Vec<u8>],
    per_query_map: &[f64],
    n_bins: usize,
) -> Result<AlignmentAnalysis> {
    if a_bars.len() != saliency.len() || a_bars.len() != per_query_map.len() {
        return Err(Error::Shape("analysis inputs differ in length".into()));
    }
    if n_bins == 0 {
        return Err(Error::Range("need at least one bin".into()));
    }
    let mut points = Vec::new();
    let mut skipped = 0;
    for ((a, s), &m) in a_bars.iter().zip(saliency).zip(per_query_map) {
        if a.len() != s.len() {
            return Err(Error::Shape("correspondence and saliency lengths differ".into()));
        }
        let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        match cosine(a, &s) {
            Some(c) => points.push((c, m)),
            None => skipped += 1,
        }
    }
    if points.is_empty() {
        return Ok(AlignmentAnalysis { bins: Vec::new(), skipped });
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut sums = vec![(0usize, 0.0); n_bins];
    for &(c, m) in &points {
        let b = if width > 0.0 { (((c - lo) / width) as usize).min(n_bins - 1) } else { 0 };
        sums[b].0 += 1;
        sums[b].1 += m;
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(b, &(count, total))| AlignmentBin {
            low: lo + width * b as f64,
            high: if b + 1 == n_bins { hi } else { lo + width * (b + 1) as f64 },
            count,
            mean_map: (count > 0).then(|| total / count as f64),
        })
        .collect();
    Ok(AlignmentAnalysis { bins, skipped })
}

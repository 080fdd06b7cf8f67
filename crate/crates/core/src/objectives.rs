//! Highlight-detection losses, their reuse on query correspondence, and the
//! weighted total objective.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::types::LossWeights;

/// Clamp keeping `1 − ā` away from zero in the probability-form negative loss.
pub const NEG_EPS: f64 = 1e-6;

/// Threshold sets of the rank-contrastive loss: for every saliency level
/// present in the instance (ascending, levels ≥ 1), the clips at or above
/// that level.
#[derive(Clone, Debug, PartialEq)]
pub struct RankLevels {
    pub levels: Vec<u8>,
    pub positives: Vec<Vec<usize>>,
    pub num_clips: usize,
}

impl RankLevels {
    pub fn new(saliency: &[u8]) -> Self {
        let mut levels: Vec<u8> = saliency.iter().copied().filter(|&s| s >= 1).collect();
        levels.sort_unstable();
        levels.dedup();
        let positives = levels
            .iter()
            .map(|&l| (0..saliency.len()).filter(|&i| saliency[i] >= l).collect())
            .collect();
        Self { levels, positives, num_clips: saliency.len() }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Draws one `(high, low)` clip pair uniformly among pairs with strictly
/// ordered saliency, or `None` when saliency is constant.
pub fn sample_margin_pair<R: Rng + ?Sized>(saliency: &[u8], rng: &mut R) -> Option<(usize, usize)> {
    let n = saliency.len();
    let count: usize = (0..n).map(|i| (0..n).filter(|&j| saliency[i] > saliency[j]).count()).sum();
    if count == 0 {
        return None;
    }
    let mut pick = rng.random_range(0..count);
    for i in 0..n {
        for j in 0..n {
            if saliency[i] > saliency[j] {
                if pick == 0 {
                    return Some((i, j));
                }
                pick -= 1;
            }
        }
    }
    unreachable!()
}

/// `max(0, Δ + s_low − s_high)` on a pre-drawn pair; 0 without a pair.
pub fn loss_margin(tape: &mut Tape, scores: Var, pair: Option<(usize, usize)>, delta: f64) -> Var {
    let Some((hi, lo)) = pair else {
        return tape.constant(Matrix::scalar(0.0));
    };
    let h = tape.gather_rows(scores, &[hi]);
    let l = tape.gather_rows(scores, &[lo]);
    let d = tape.sub(l, h);
    let d = tape.add_scalar(d, delta);
    tape.relu(d)
}

/// `−Σ_r log(Σ_{pos_r} e^{s/τ} / Σ_all e^{s/τ})` over the instance's levels.
pub fn loss_rank_contrastive(tape: &mut Tape, scores: Var, levels: &RankLevels, tau: f64) -> Result<Var> {
    let (n, c) = tape.shape(scores);
    if n != levels.num_clips || c != 1 {
        return Err(Error::Shape(format!("scores are {n}x{c} for {} clips", levels.num_clips)));
    }
    if levels.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let scaled = tape.scale(scores, 1.0 / tau);
    let row = tape.transpose(scaled);
    let all = tape.log_sum_exp_rows(row);
    let mut total = None;
    for pos in &levels.positives {
        let p = tape.gather_rows(scaled, pos);
        let p = tape.transpose(p);
        let lp = tape.log_sum_exp_rows(p);
        let term = tape.sub(all, lp);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    }
    Ok(total.expect("non-empty levels"))
}

/// `mean_i −log(1 − σ(s_i))` on scores from a mismatched query.
pub fn loss_negative_pair(tape: &mut Tape, scores: Var) -> Var {
    let sp = tape.softplus(scores);
    tape.mean(sp)
}

/// `mean_i −log(1 − ā_i)` on correspondence from a mismatched query. `ā`
/// is already a probability, so no squashing is applied.
pub fn loss_negative_pair_prob(tape: &mut Tape, a_bar: Var) -> Var {
    let a = tape.clamp(a_bar, -1.0, 1.0 - NEG_EPS);
    let neg = tape.neg(a);
    let comp = tape.add_scalar(neg, 1.0);
    let l = tape.log(comp);
    let m = tape.mean(l);
    tape.neg(m)
}

/// Margin, rank-contrastive and (optional) negative-pair terms.
#[derive(Clone, Copy, Debug)]
pub struct HdLoss {
    pub margin: Var,
    pub rank: Var,
    pub negative: Option<Var>,
    pub total: Var,
}

/// How the negative-pair term turns its input into a probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeForm {
    /// Unbounded saliency scores, squashed with the logistic function.
    Logistic,
    /// Inputs that are already probabilities (query correspondence).
    Probability,
}

pub fn loss_hd(
    tape: &mut Tape,
    scores: Var,
    negative_scores: Option<Var>,
    levels: &RankLevels,
    pair: Option<(usize, usize)>,
    weights: &LossWeights,
    form: NegativeForm,
) -> Result<HdLoss> {
    let margin = loss_margin(tape, scores, pair, weights.margin);
    let rank = loss_rank_contrastive(tape, scores, levels, weights.tau_rank)?;
    let negative = negative_scores.map(|s| match form {
        NegativeForm::Logistic => loss_negative_pair(tape, s),
        NegativeForm::Probability => loss_negative_pair_prob(tape, s),
    });
    let mut total = tape.add(margin, rank);
    if let Some(n) = negative {
        total = tape.add(total, n);
    }
    Ok(HdLoss { margin, rank, negative, total })
}

/// Scalar values of every loss term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub mr: f64,
    pub hl: f64,
    pub attn: f64,
    pub bce: f64,
    pub ortho: f64,
    pub align: f64,
    pub distill: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.mr += o.mr;
        self.hl += o.hl;
        self.attn += o.attn;
        self.bce += o.bce;
        self.ortho += o.ortho;
        self.align += o.align;
        self.distill += o.distill;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            mr: self.mr * s,
            hl: self.hl * s,
            attn: self.attn * s,
            bce: self.bce * s,
            ortho: self.ortho * s,
            align: self.align * s,
            distill: self.distill * s,
        }
    }
}

/// `L_mr + λ_hl(L_hl + L_attn + L_bce) + λ_ortho L_ortho + λ_align L_align + λ_distill L_distill`.
pub fn total_loss(p: &LossParts, w: &LossWeights) -> f64 {
    p.mr + w.hl * (p.hl + p.attn + p.bce) + w.ortho * p.ortho + w.align * p.align + w.distill * p.distill
}

/// Loss nodes of one instance; absent terms are inactive in the configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub mr: Option<Var>,
    pub hl: Option<Var>,
    pub attn: Option<Var>,
    pub bce: Option<Var>,
    pub ortho: Option<Var>,
    pub align: Option<Var>,
    pub distill: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        LossParts {
            mr: v(self.mr),
            hl: v(self.hl),
            attn: v(self.attn),
            bce: v(self.bce),
            ortho: v(self.ortho),
            align: v(self.align),
            distill: v(self.distill),
        }
    }
}

/// Tape form of [`total_loss`].
pub fn total_loss_var(tape: &mut Tape, l: &LossVars, w: &LossWeights) -> Var {
    let terms = [
        (l.mr, 1.0),
        (l.hl, w.hl),
        (l.attn, w.hl),
        (l.bce, w.hl),
        (l.ortho, w.ortho),
        (l.align, w.align),
        (l.distill, w.distill),
    ];
    let mut total = tape.constant(Matrix::scalar(0.0));
    for (v, lambda) in terms {
        if let Some(v) = v {
            let s = tape.scale(v, lambda);
            total = tape.add(total, s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    fn margin(s: &[f64], pair: Option<(usize, usize)>) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(col(s));
        let l = loss_margin(&mut t, v, pair, 0.2);
        t.scalar(l)
    }

    fn rank(s: &[f64], sal: &[u8], tau: f64) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(col(s));
        let l = loss_rank_contrastive(&mut t, v, &RankLevels::new(sal), tau).unwrap();
        t.scalar(l)
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[0.8, 0.3], Some((0, 1))), 0.0);
        assert!((margin(&[0.4, 0.3], Some((0, 1))) - 0.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_margin_pair(&[2, 2, 2], &mut rng), None);
        assert_eq!(margin(&[0.4, 0.3], None), 0.0);
    }

    #[test]
    fn margin_pairs_are_valid_and_cover_orderings() {
        let sal = [0, 3, 1, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..400 {
            let (h, l) = sample_margin_pair(&sal, &mut rng).unwrap();
            assert!(sal[h] > sal[l]);
            seen.insert((h, l));
        }
        // valid pairs: (1,0) (1,2) (3,0) (3,2) (2,0)
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn rank_levels_ascend() {
        let r = RankLevels::new(&[0, 4, 2, 2, 0]);
        assert_eq!(r.levels, vec![2, 4]);
        assert_eq!(r.positives, vec![vec![1, 2, 3], vec![1]]);
        assert!(RankLevels::new(&[0, 0]).is_empty());
    }

    #[test]
    fn rank_contrastive_examples() {
        assert!(rank(&[0.1, 0.5], &[3, 3], 0.5).abs() < 1e-12);
        assert!((rank(&[0.2, 0.2], &[1, 0], 0.5) - LN2).abs() < 1e-12);
        assert!(rank(&[0.4, 0.2], &[1, 0], 0.5) < rank(&[0.2, 0.2], &[1, 0], 0.5));
        assert_eq!(rank(&[0.4, 0.2], &[0, 0], 0.5), 0.0);
        let s = [0.3, -0.2, 1.1, 0.4];
        let shifted: Vec<f64> = s.iter().map(|v| v + 2.5).collect();
        assert!((rank(&s, &[0, 2, 4, 1], 0.5) - rank(&shifted, &[0, 2, 4, 1], 0.5)).abs() < 1e-12);
    }

    #[test]
    fn negative_pair_examples() {
        let mut t = Tape::new();
        let z = t.constant(col(&[0.0, 0.0]));
        let l = loss_negative_pair(&mut t, z);
        assert!((t.scalar(l) - LN2).abs() < 1e-12);
        let z = t.constant(col(&[-40.0]));
        let l = loss_negative_pair(&mut t, z);
        assert!(t.scalar(l) < 1e-15);
        let a = t.constant(col(&[0.5, 0.0]));
        let l = loss_negative_pair_prob(&mut t, a);
        assert!((t.scalar(l) - 0.5 * LN2).abs() < 1e-12);
    }

    #[test]
    fn hd_on_correspondence_matches_direct_terms() {
        let a = [0.5, 0.5];
        let sal = [2, 0];
        let w = LossWeights::default();
        let mut t = Tape::new();
        let v = t.constant(col(&a));
        let l = loss_hd(&mut t, v, None, &RankLevels::new(&sal), Some((0, 1)), &w, NegativeForm::Probability).unwrap();
        assert!((t.scalar(l.margin) - 0.2).abs() < 1e-12);
        assert!((t.scalar(l.rank) - LN2).abs() < 1e-12);
        assert!((t.scalar(l.total) - (0.2 + LN2)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let p = LossParts { ortho: 1.0, ..Default::default() };
        assert_eq!(total_loss(&p, &w), 1.0);
        let p = LossParts { distill: 0.7, mr: 2.0, ..Default::default() };
        let w2 = LossWeights { distill: 2.0 * w.distill, ..w };
        assert!((total_loss(&p, &w2) - total_loss(&p, &w) - 0.7).abs() < 1e-12);

        let mut t = Tape::new();
        let lv = LossVars {
            mr: Some(t.constant(Matrix::scalar(2.0))),
            distill: Some(t.constant(Matrix::scalar(0.7))),
            ..Default::default()
        };
        let tot = total_loss_var(&mut t, &lv, &w2);
        assert!((t.scalar(tot) - total_loss(&lv.values(&t), &w2)).abs() < 1e-12);
    }
}

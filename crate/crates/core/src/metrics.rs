//! Ranking metrics for OOD detection and misclassification detection.
//!
//! All functions read scores as "higher means more positive". Samples with
//! equal scores always enter or leave the accepted set together, except in
//! [`aurc_eaurc`], which averages per-sample risks in a stable order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub is_positive: Vec<bool>,
    /// Misclassification detection only: prediction equals label.
    pub correctness: Option<Vec<bool>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, is_positive: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Input("empty score set".into()));
        }
        if scores.len() != is_positive.len() {
            return Err(Error::Shape(format!("{} scores for {} flags", scores.len(), is_positive.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Input("NaN score".into()));
        }
        Ok(Self { scores, is_positive, correctness: None })
    }

    /// Confidence scores for misclassification detection; correct predictions are the positives.
    pub fn for_misd(scores: Vec<f64>, correctness: Vec<bool>) -> Result<Self> {
        let mut s = Self::new(scores, correctness.clone())?;
        s.correctness = Some(correctness);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Same samples with positives and negatives exchanged.
    pub fn flipped(&self) -> Self {
        Self {
            scores: self.scores.clone(),
            is_positive: self.is_positive.iter().map(|p| !p).collect(),
            correctness: self.correctness.clone(),
        }
    }

    /// Same samples with negated scores.
    pub fn negated(&self) -> Self {
        Self {
            scores: self.scores.iter().map(|s| -s).collect(),
            is_positive: self.is_positive.clone(),
            correctness: self.correctness.clone(),
        }
    }

    fn counts(&self) -> (u64, u64) {
        let p = self.is_positive.iter().filter(|&&b| b).count() as u64;
        (p, self.len() as u64 - p)
    }
}

/// Samples sharing one score value.
#[derive(Clone, Copy, Debug, PartialEq)]
struct TieGroup {
    score: f64,
    positives: u64,
    negatives: u64,
}

fn descending_groups(scores: &[f64], flags: &[bool]) -> Vec<TieGroup> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<TieGroup> = Vec::new();
    for i in order {
        let (pos, neg) = if flags[i] { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            // -0.0 and 0.0 are one threshold.
            Some(g) if g.score == scores[i] => {
                g.positives += pos;
                g.negatives += neg;
            }
            _ => groups.push(TieGroup { score: scores[i], positives: pos, negatives: neg }),
        }
    }
    groups
}

fn require_both(s: &ScoreSet) -> Result<(u64, u64)> {
    let (p, n) = s.counts();
    if p == 0 || n == 0 {
        return Err(Error::MetricUndefined("needs at least one positive and one negative sample"));
    }
    Ok((p, n))
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    let (p, n) = require_both(s)?;
    let mut negatives_below = n;
    // Twice the Mann–Whitney statistic, kept integral.
    let mut twice_wins: u128 = 0;
    for g in descending_groups(&s.scores, &s.is_positive) {
        negatives_below -= g.negatives;
        twice_wins += g.positives as u128 * (2 * negatives_below as u128 + g.negatives as u128);
    }
    Ok(twice_wins as f64 / (2.0 * p as f64 * n as f64))
}

/// Average precision with step interpolation over descending thresholds.
pub fn aupr(s: &ScoreSet) -> Result<f64> {
    let (p, _) = s.counts();
    if p == 0 {
        return Err(Error::MetricUndefined("needs at least one positive sample"));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    for g in descending_groups(&s.scores, &s.is_positive) {
        tp += g.positives;
        fp += g.negatives;
        if g.positives > 0 {
            area += (g.positives as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// Smallest false-positive rate over thresholds whose true-positive rate reaches `tpr_target`.
pub fn fpr_at_tpr(s: &ScoreSet, tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::param("tpr_target", format!("must lie in (0, 1], got {tpr_target}")));
    }
    let (p, n) = require_both(s)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in descending_groups(&s.scores, &s.is_positive) {
        tp += g.positives;
        fp += g.negatives;
        if tp as f64 / p as f64 >= tpr_target {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("accepting every sample reaches TPR 1")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One ROC point per distinct score, highest threshold first.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (p, n) = require_both(s)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    Ok(descending_groups(&s.scores, &s.is_positive)
        .into_iter()
        .map(|g| {
            tp += g.positives;
            fp += g.negatives;
            RocPoint { threshold: g.score, fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64 }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RCPoint {
    pub threshold: f64,
    pub coverage: f64,
    pub risk: f64,
}

fn correctness(s: &ScoreSet) -> Result<&[bool]> {
    match &s.correctness {
        Some(c) if !c.is_empty() => Ok(c),
        _ => Err(Error::Input("risk-coverage needs per-sample correctness".into())),
    }
}

/// Risk-coverage curve, one point per distinct score, highest score first.
pub fn risk_coverage(s: &ScoreSet) -> Result<Vec<RCPoint>> {
    let correct = correctness(s)?;
    let n = s.len() as f64;
    let mut accepted = 0u64;
    let mut errors = 0u64;
    Ok(descending_groups(&s.scores, correct)
        .into_iter()
        .map(|g| {
            accepted += g.positives + g.negatives;
            errors += g.negatives;
            RCPoint { threshold: g.score, coverage: accepted as f64 / n, risk: errors as f64 / accepted as f64 }
        })
        .collect())
}

/// `(AURC, E-AURC)`. AURC averages the selective risk after accepting each
/// sample in turn (descending score, ties in input order); E-AURC subtracts
/// the AURC of the ordering that accepts every correct sample first.
pub fn aurc_eaurc(s: &ScoreSet) -> Result<(f64, f64)> {
    let correct = correctness(s)?;
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut errors = 0u64;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        errors += (!correct[i]) as u64;
        sum += errors as f64 / (k + 1) as f64;
    }
    let aurc = sum / n as f64;
    let wrong = correct.iter().filter(|&&c| !c).count();
    let optimal: f64 = (n - wrong + 1..=n).map(|k| (k - (n - wrong)) as f64 / k as f64).sum::<f64>() / n as f64;
    Ok((aurc, aurc - optimal))
}

/// Fraction of `predicted == labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Input("accuracy needs equal-length, non-empty inputs".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predicted.len() as f64)
}

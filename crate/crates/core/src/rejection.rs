//! Scoring functions and the three-way decision rule.
//!
//! Every score is oriented so that larger means "more in-distribution /
//! more likely correct". The energy score is used with the sign
//! `-log Σ exp(g_i)` exactly as defined; callers that want the opposite
//! orientation must negate it themselves.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{argmax, dste_combine, log_sum_exp, max_of, sigmoid, softmax_unchecked, PosteriorK1};

pub const DEFAULT_EPS: f64 = 0.05;
pub const DEFAULT_DELTA: f64 = 0.5;

/// Maximum closed-set softmax probability.
pub fn score_msp(logits: &[f64]) -> f64 {
    max_of(&softmax_unchecked(logits))
}

pub fn score_energy(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

pub fn score_maxlogit(logits: &[f64]) -> f64 {
    max_of(logits)
}

/// Largest one-vs-all sigmoid output.
pub fn score_binary_max(logits: &[f64]) -> f64 {
    logits.iter().map(|&g| sigmoid(g)).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnifiedBranch {
    /// The score is `1 - p_ood`.
    InDistributionMass,
    /// The score is `max_i p_i + ε`.
    CalibratedMax,
}

/// Which side of `min{1 - p_ood, max_i p_i + ε}` is smaller.
///
/// `1 - p_ood = max_i p_i + Σ_{i≠argmax} p_i`, so the first side wins
/// exactly when the non-maximal known mass is below `ε`.
pub fn unified_branch(post: &PosteriorK1, eps: f64) -> UnifiedBranch {
    let top = post.predicted_class();
    let rest: f64 = post.known.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, p)| p).sum();
    if rest < eps {
        UnifiedBranch::InDistributionMass
    } else {
        UnifiedBranch::CalibratedMax
    }
}

/// Unified score `min{1 - p_ood, max_i p_i + ε}`.
pub fn score_unified(post: &PosteriorK1, eps: f64) -> f64 {
    match unified_branch(post, eps) {
        UnifiedBranch::InDistributionMass => 1.0 - post.ood,
        UnifiedBranch::CalibratedMax => post.max_known() + eps,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "class")]
pub enum Verdict {
    Accept(usize),
    RejectOod,
    RejectMisclassification,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub score: f64,
}

/// Chow-style rule on K+1 posteriors: OOD if `p_ood ≥ max_i p_i`, else
/// misclassification if `max_i p_i ≤ δ`, else accept the argmax. The
/// attached score is the unified score at `eps`.
pub fn decide(post: &PosteriorK1, delta: f64, eps: f64) -> Decision {
    let top = post.max_known();
    let verdict = if post.ood >= top {
        Verdict::RejectOod
    } else if top <= delta {
        Verdict::RejectMisclassification
    } else {
        Verdict::Accept(post.predicted_class())
    };
    Decision { verdict, score: score_unified(post, eps) }
}

/// Named rejection rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `min{1 - p_ood, max p^m + ε}` on the K+1 posteriors.
    Unified,
    /// `max_i σ(g_i)`.
    BinaryMax,
    Msp,
    Energy,
    MaxLogit,
}

impl Rule {
    pub const ALL: [Rule; 5] = [Rule::Unified, Rule::BinaryMax, Rule::Msp, Rule::Energy, Rule::MaxLogit];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Unified => "unified",
            Rule::BinaryMax => "binary_max",
            Rule::Msp => "msp",
            Rule::Energy => "energy",
            Rule::MaxLogit => "maxlogit",
        }
    }

    /// Score of one sample's logits under this rule.
    pub fn score(self, logits: &[f64], eps: f64) -> f64 {
        match self {
            Rule::Unified => score_unified(&dste_combine(logits), eps),
            Rule::BinaryMax => score_binary_max(logits),
            Rule::Msp => score_msp(logits),
            Rule::Energy => score_energy(logits),
            Rule::MaxLogit => score_maxlogit(logits),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rejection rule `{s}`")))
    }
}

/// Predicted class for a logit vector (lowest index on ties).
pub fn predict(logits: &[f64]) -> usize {
    argmax(logits)
}

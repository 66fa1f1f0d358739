//! Probability transforms over a vector of K class logits.
//!
//! Besides the usual closed-set softmax this module turns K one-vs-all
//! sigmoid outputs into K+1 posteriors (K known classes plus one
//! out-of-distribution class) by Dempster–Shafer combination. The closed
//! form is a softmax with an extra, fixed logit of 0 for the OOD class;
//! [`dste_combine_oracle`] evaluates the product form of the combination
//! literally and is kept as an independent check of the closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for sigmoid outputs; the upper clamp is `1 - PROB_FLOOR`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(v_i)`, max-shifted.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = max_of(values);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Input("empty logit vector".into()));
    }
    match logits.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::Input(format!("logit {i} is not finite ({})", logits[i]))),
        None => Ok(()),
    }
}

/// Closed-set softmax over K classes.
pub fn softmax_closed(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let m = max_of(logits);
    let exps: Vec<f64> = logits.iter().map(|g| (g - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Logistic function without overflow on either tail.
pub fn sigmoid(g: f64) -> f64 {
    if g >= 0.0 {
        1.0 / (1.0 + (-g).exp())
    } else {
        let e = g.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Outputs of K binary (one-vs-all) classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryProbs(Vec<f64>);

impl BinaryProbs {
    /// Wraps raw probabilities; values must lie in `[0, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("empty probability vector".into()));
        }
        if let Some(p) = values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Element-wise sigmoid, clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn sigmoid_ova(logits: &[f64]) -> BinaryProbs {
    BinaryProbs(logits.iter().map(|&g| clamp_prob(sigmoid(g))).collect())
}

/// K known-class posteriors plus the OOD posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorK1 {
    pub known: Vec<f64>,
    pub ood: f64,
}

impl PosteriorK1 {
    pub fn num_classes(&self) -> usize {
        self.known.len()
    }

    pub fn max_known(&self) -> f64 {
        max_of(&self.known)
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.known)
    }

    pub fn total(&self) -> f64 {
        self.known.iter().sum::<f64>() + self.ood
    }
}

/// Closed-form combination of K sigmoid classifiers:
/// `p_i = exp(g_i) / (1 + Σ_j exp(g_j))`, `p_ood = 1 / (1 + Σ_j exp(g_j))`.
///
/// The implicit OOD logit 0 joins the max-shift, so large logits of either
/// sign are safe.
pub fn dste_combine(logits: &[f64]) -> PosteriorK1 {
    let m = max_of(logits).max(0.0);
    let exps: Vec<f64> = logits.iter().map(|g| (g - m).exp()).collect();
    let ood_term = (-m).exp();
    let z = ood_term + exps.iter().sum::<f64>();
    PosteriorK1 { known: exps.into_iter().map(|e| e / z).collect(), ood: ood_term / z }
}

/// Product-form evidence combination, evaluated literally:
/// `p_i ∝ p_i^b Π_{j≠i} (1 - p_j^b)` and `p_ood ∝ Π_j (1 - p_j^b)`, both
/// divided by the normaliser A that makes them sum to one.
pub fn dste_combine_oracle(binary: &BinaryProbs) -> Result<PosteriorK1> {
    let p = binary.values();
    if let Some(v) = p.iter().find(|&&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Domain(format!("binary probability {v} must lie strictly inside (0, 1)")));
    }
    let k = p.len();
    let mut evidence = Vec::with_capacity(k);
    for i in 0..k {
        let mut prod = p[i];
        for (j, &pj) in p.iter().enumerate() {
            if j != i {
                prod *= 1.0 - pj;
            }
        }
        evidence.push(prod);
    }
    let none: f64 = p.iter().map(|&pj| 1.0 - pj).product();
    let a = evidence.iter().sum::<f64>() + none;
    Ok(PosteriorK1 { known: evidence.into_iter().map(|e| e / a).collect(), ood: none / a })
}

//! Training objectives and their analytic gradients.
//!
//! Every objective is a per-sample loss on top of the model's logits `g`
//! and/or its squared prototype distances `d`:
//!
//! | objective | loss |
//! |-----------|------|
//! | `ova`     | `L_ova + λ L_pl` |
//! | `hybrid`  | `β L_ova + (1-β) L_reg + λ L_pl` |
//! | `dce`     | `L_dce + λ L_pl` |
//! | `ce`      | `L_ce` (softmax baseline, usually with a linear head) |
//!
//! Gradients are pushed back as `∂L/∂g` (for the head) and `∂L/∂d` (for the
//! distances), then through the extractor by the chain rule. Batch values are
//! arithmetic means of the per-sample values, reduced in sample order.

#![allow(clippy::needless_range_loop)]

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Layer, LinearHead, ModelParams, ThresholdMode};
use crate::posterior::{self, clamp_prob, dste_combine, log_sum_exp, sigmoid, BinaryProbs, PosteriorK1};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Distance-based softmax cross-entropy.
    Dce,
    /// Sum of K binary cross-entropies on sigmoid outputs.
    Ova,
    /// OVA mixed with cross-entropy on the K+1 combined posteriors.
    Hybrid,
    /// Closed-set softmax cross-entropy on the model logits.
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub objective: Objective,
    pub beta: f64,
    pub lambda: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ova: f64,
    pub l_reg: f64,
    pub l_pl: f64,
    pub l_dce: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_ova += other.l_ova;
        self.l_reg += other.l_reg;
        self.l_pl += other.l_pl;
        self.l_dce += other.l_dce;
        self.l_ce += other.l_ce;
        self.total += other.total;
    }

    pub(crate) fn scaled(mut self, s: f64) -> Self {
        self.l_ova *= s;
        self.l_reg *= s;
        self.l_pl *= s;
        self.l_dce *= s;
        self.l_ce *= s;
        self.total *= s;
        self
    }

    pub(crate) fn sum<'a>(parts: impl IntoIterator<Item = &'a LossBreakdown>) -> Self {
        let mut acc = LossBreakdown::default();
        parts.into_iter().for_each(|p| acc.accumulate(p));
        acc
    }
}

/// Gradient with the same layout as [`ModelParams`].
///
/// `thresholds` always has K entries: per-class gradients, or under a
/// shared mode the gradient of the single shared threshold repeated K
/// times, or zeros when the threshold is constant.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
    pub linear_head: Option<LinearHead>,
    pub prototypes: Array2<f64>,
    pub thresholds: Array1<f64>,
}

impl GradientSet {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Layer { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
            linear_head: p
                .linear_head
                .as_ref()
                .map(|h| LinearHead { weight: Array2::zeros(h.weight.raw_dim()), bias: Array1::zeros(h.bias.len()) }),
            prototypes: Array2::zeros(p.prototypes.raw_dim()),
            thresholds: Array1::zeros(p.thresholds.len()),
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
        if let Some(h) = &mut self.linear_head {
            h.weight *= s;
            h.bias *= s;
        }
        self.prototypes *= s;
        self.thresholds *= s;
    }

    /// Applies the threshold-mode reduction to raw per-class threshold gradients.
    fn reduce_thresholds(&mut self, mode: ThresholdMode) {
        match mode {
            ThresholdMode::LearnablePerClass => {}
            ThresholdMode::LearnableShared => {
                let total = self.thresholds.sum();
                self.thresholds.fill(total);
            }
            ThresholdMode::ConstantShared => self.thresholds.fill(0.0),
        }
    }

    /// Flat vector in the order of [`ModelParams::flatten`].
    pub fn flatten(&self, mode: ThresholdMode) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        if let Some(head) = &self.linear_head {
            out.extend(head.weight.iter());
            out.extend(head.bias.iter());
        }
        out.extend(self.prototypes.iter());
        out.extend(self.thresholds.iter().take(mode.free_thresholds(self.thresholds.len())));
        out
    }
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::Label { label: y as i64, num_classes: k });
    }
    Ok(())
}

/// One-vs-all loss `-(log p_y + Σ_{i≠y} log(1 - p_i))` on clamped probabilities.
pub fn ova_loss(binary: &BinaryProbs, y: usize) -> Result<f64> {
    let p = binary.values();
    check_label(y, p.len())?;
    Ok(-p
        .iter()
        .enumerate()
        .map(|(i, &pi)| if i == y { clamp_prob(pi).ln() } else { clamp_prob(1.0 - pi).ln() })
        .sum::<f64>())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// OVA loss straight from logits, `Σ softplus(∓g_i)`. Exact in log space, so
/// no clamp is needed and `σ(g_i) - 1{i=y}` is its gradient everywhere.
fn ova_loss_logits(g: &[f64], y: usize) -> f64 {
    g.iter().enumerate().map(|(i, &gi)| if i == y { softplus(-gi) } else { softplus(gi) }).sum()
}

/// `-log p_y^m = log(1 + Σ e^{g_i}) - g_y`, with the OOD logit fixed at 0.
fn reg_loss_logits(g: &[f64], y: usize) -> f64 {
    let mut ext = Vec::with_capacity(g.len() + 1);
    ext.push(0.0);
    ext.extend_from_slice(g);
    log_sum_exp(&ext) - g[y]
}

/// Cross-entropy on the combined K+1 posterior, `-log p_y^m`.
pub fn reg_loss(post: &PosteriorK1, y: usize) -> Result<f64> {
    check_label(y, post.num_classes())?;
    Ok(-clamp_prob(post.known[y]).ln())
}

/// Squared distance from the feature to its class prototype.
pub fn prototype_loss(f: ArrayView1<'_, f64>, p: &ModelParams, y: usize) -> Result<f64> {
    check_label(y, p.num_classes())?;
    if f.len() != p.feat_dim() {
        return Err(Error::Shape(format!("feature has {} entries, expected {}", f.len(), p.feat_dim())));
    }
    Ok(f.iter().zip(p.prototypes.row(y)).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Distance-based cross-entropy `-log softmax(-ξ d)_y`.
pub fn dce_loss(distances: &[f64], xi: f64, y: usize) -> Result<f64> {
    check_label(y, distances.len())?;
    if !(xi > 0.0) {
        return Err(Error::param("xi", "must be positive"));
    }
    if distances.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::Domain("distances must be non-negative".into()));
    }
    let scaled: Vec<f64> = distances.iter().map(|d| -xi * d).collect();
    Ok(log_sum_exp(&scaled) - scaled[y])
}

/// Per-sample loss breakdown for the configured objective.
pub fn total_loss(p: &ModelParams, x: ArrayView1<'_, f64>, y: usize, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_label(y, p.num_classes())?;
    let trace = p.forward(x)?;
    Ok(sample_terms(p, &trace.logits, &trace.sq_distances, y, cfg).0)
}

struct LogitGrads {
    /// `∂L/∂g`
    logits: Vec<f64>,
    /// `∂L/∂d` from terms that read the distances directly.
    distances: Vec<f64>,
}

fn sample_terms(
    p: &ModelParams,
    g: &Array1<f64>,
    d: &Array1<f64>,
    y: usize,
    cfg: &LossConfig,
) -> (LossBreakdown, LogitGrads) {
    let g = g.as_slice().expect("contiguous logits");
    let k = g.len();
    let xi = p.temperature();
    let mut parts = LossBreakdown::default();
    let mut dg = vec![0.0; k];
    let mut dd = vec![0.0; k];
    let onehot = |i: usize| if i == y { 1.0 } else { 0.0 };

    match cfg.objective {
        Objective::Ova | Objective::Hybrid => {
            let w_ova = if cfg.objective == Objective::Ova { 1.0 } else { cfg.beta };
            parts.l_ova = ova_loss_logits(g, y);
            for i in 0..k {
                dg[i] += w_ova * (sigmoid(g[i]) - onehot(i));
            }
            parts.total += w_ova * parts.l_ova;
            if cfg.objective == Objective::Hybrid {
                let post = dste_combine(g);
                parts.l_reg = reg_loss_logits(g, y);
                for i in 0..k {
                    dg[i] += (1.0 - cfg.beta) * (post.known[i] - onehot(i));
                }
                parts.total += (1.0 - cfg.beta) * parts.l_reg;
            }
        }
        Objective::Ce => {
            parts.l_ce = log_sum_exp(g) - g[y];
            let q = posterior::softmax_unchecked(g);
            for i in 0..k {
                dg[i] += q[i] - onehot(i);
            }
            parts.total += parts.l_ce;
        }
        Objective::Dce => {
            let h: Vec<f64> = d.iter().map(|di| -xi * di).collect();
            parts.l_dce = log_sum_exp(&h) - h[y];
            let q = posterior::softmax_unchecked(&h);
            for i in 0..k {
                dd[i] += -xi * (q[i] - onehot(i));
            }
            parts.total += parts.l_dce;
        }
    }

    // The softmax baseline has no prototype term.
    if cfg.objective != Objective::Ce {
        parts.l_pl = d[y];
        parts.total += cfg.lambda * parts.l_pl;
        dd[y] += cfg.lambda;
    }

    (parts, LogitGrads { logits: dg, distances: dd })
}

/// Adds one sample's gradient into `grad` and returns its loss and whether
/// the argmax prediction was correct.
fn accumulate_sample(
    p: &ModelParams,
    x: ArrayView1<'_, f64>,
    y: usize,
    cfg: &LossConfig,
    grad: &mut GradientSet,
) -> Result<(LossBreakdown, bool)> {
    let trace = p.forward(x)?;
    let (parts, lg) = sample_terms(p, &trace.logits, &trace.sq_distances, y, cfg);
    let correct = posterior::argmax(trace.logits.as_slice().unwrap()) == y;
    let f = trace.features.features();
    let xi = p.temperature();

    let mut df = Array1::<f64>::zeros(f.len());
    let mut dd = lg.distances;
    match (&p.linear_head, &mut grad.linear_head) {
        (Some(head), Some(ghead)) => {
            let dg = ArrayView1::from(&lg.logits);
            ghead.weight += &outer(dg, f.view());
            ghead.bias += &dg;
            df += &head.weight.t().dot(&dg);
        }
        _ => {
            // g_i = -ξ (d_i - τ_i)
            for i in 0..dd.len() {
                dd[i] += -xi * lg.logits[i];
                grad.thresholds[i] += xi * lg.logits[i];
            }
        }
    }
    for (i, mu) in p.prototypes.rows().into_iter().enumerate() {
        if dd[i] == 0.0 {
            continue;
        }
        let diff = f - &mu;
        df.scaled_add(2.0 * dd[i], &diff);
        grad.prototypes.row_mut(i).scaled_add(-2.0 * dd[i], &diff);
    }

    let mut delta = df;
    let trace = &trace.features;
    for l in (0..p.layers.len()).rev() {
        let a_prev = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
        grad.layers[l].weight += &outer(delta.view(), a_prev.view());
        grad.layers[l].bias += &delta;
        if l > 0 {
            let mut back = p.layers[l].weight.t().dot(&delta);
            back.zip_mut_with(&trace.pre_activations[l - 1], |b, &z| {
                if z <= 0.0 {
                    *b = 0.0;
                }
            });
            delta = back;
        }
    }
    Ok((parts, correct))
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a = a.insert_axis(Axis(1));
    let b = b.insert_axis(Axis(0));
    &a * &b
}

/// Batch result: mean loss, mean gradient and the number of correct argmax predictions.
pub(crate) struct BatchResult {
    pub loss: LossBreakdown,
    pub grad: GradientSet,
    pub correct: usize,
}

pub(crate) fn batch_loss_grad(
    p: &ModelParams,
    batch: &Dataset,
    rows: &[usize],
    cfg: &LossConfig,
) -> Result<BatchResult> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let k = p.num_classes();
    let mut grad = GradientSet::zeros_like(p);
    let mut losses = Vec::with_capacity(rows.len());
    let mut correct = 0;
    for &i in rows {
        let label = batch.labels()[i];
        if label < 0 || label as usize >= k {
            return Err(Error::Label { label, num_classes: k });
        }
        let (parts, ok) = accumulate_sample(p, batch.row(i), label as usize, cfg, &mut grad)?;
        losses.push(parts);
        correct += ok as usize;
    }
    let inv = 1.0 / rows.len() as f64;
    grad.scale(inv);
    grad.reduce_thresholds(p.threshold_mode);
    Ok(BatchResult { loss: LossBreakdown::sum(&losses).scaled(inv), grad, correct })
}

/// Batch-mean loss and gradient over every row of `batch`.
pub fn total_loss_grad(p: &ModelParams, batch: &Dataset, cfg: &LossConfig) -> Result<(LossBreakdown, GradientSet)> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    let r = batch_loss_grad(p, batch, &rows, cfg)?;
    Ok((r.loss, r.grad))
}

/// Central differences `(f(θ + h e_k) - f(θ - h e_k)) / 2h` for every coordinate.
pub fn finite_diff_grad(scalar_fn: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|k| {
            let orig = theta[k];
            theta[k] = orig + h;
            let up = scalar_fn(&theta);
            theta[k] = orig - h;
            let down = scalar_fn(&theta);
            theta[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Batch-mean total loss as a function of the flattened parameters.
pub fn flat_objective<'a>(p: &'a ModelParams, batch: &'a Dataset, cfg: &'a LossConfig) -> impl Fn(&[f64]) -> f64 + 'a {
    move |theta: &[f64]| {
        let mut q = p.clone();
        q.set_flat(theta).expect("flat length");
        total_loss_grad(&q, batch, cfg).expect("valid batch").0.total
    }
}

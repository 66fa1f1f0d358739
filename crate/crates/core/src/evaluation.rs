//! Scoring a trained model on InD and OOD test sets, and the files that
//! carry the results: the per-sample score dump, the metrics report and
//! the curve exports.
//!
//! The report is a pure function of the score dump ([`report_from_rows`]),
//! so every number in it can be recomputed from `scores.csv`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_real, Dataset, OOD_LABEL};
use crate::error::{Error, Result};
use crate::metrics::{aupr, aurc_eaurc, auroc, fpr_at_tpr, risk_coverage, roc_curve, ScoreSet};
use crate::model::ModelParams;
use crate::posterior::{argmax, dste_combine};
use crate::rejection::{decide, Rule, Verdict};

/// TPR at which FPR is reported.
pub const FPR_TPR_TARGET: f64 = 0.95;

/// One line of the score dump.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    /// Position in the concatenation of the InD set followed by the OOD set.
    pub sample_index: usize,
    pub true_label: i64,
    pub pred_label: usize,
    pub rule: Rule,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    /// InD positive.
    pub auroc: f64,
    /// InD positive.
    pub aupr: f64,
    /// OOD positive: fraction of InD samples flagged when 95% of OOD samples are.
    pub fpr95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisdMetrics {
    /// Correct predictions positive; `None` when every prediction is right (or wrong).
    pub auroc: Option<f64>,
    /// Misclassifications positive.
    pub fpr95: Option<f64>,
    pub aurc: f64,
    pub e_aurc: f64,
    pub aurc_x1e3: f64,
    pub e_aurc_x1e3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleMetrics {
    pub ood: OodMetrics,
    pub misd: MisdMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub eps: f64,
    pub delta: f64,
    pub rules: Vec<Rule>,
    pub num_ind: usize,
    pub num_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Closed-set accuracy on the InD set.
    pub accuracy: f64,
    pub per_rule: BTreeMap<String, RuleMetrics>,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionRow {
    pub sample_index: usize,
    pub true_label: i64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<ScoreRow>,
    pub decisions: Vec<DecisionRow>,
}

fn check_sets(ind: &Dataset, ood: &Dataset) -> Result<()> {
    ind.ensure_known_labels()?;
    if let Some(&label) = ood.labels().iter().find(|&&l| l != OOD_LABEL) {
        return Err(Error::Input(format!("OOD test set contains known label {label}")));
    }
    Ok(())
}

/// Logits of every sample, InD first.
fn all_logits(model: &ModelParams, ind: &Dataset, ood: &Dataset) -> Result<Vec<(i64, Vec<f64>)>> {
    let mut out = Vec::with_capacity(ind.len() + ood.len());
    for ds in [ind, ood] {
        for i in 0..ds.len() {
            out.push((ds.labels()[i], model.logits(ds.row(i))?.to_vec()));
        }
    }
    Ok(out)
}

/// Score dump, sample-major: every rule for sample 0, then sample 1, ...
pub fn score_rows(
    model: &ModelParams,
    ind: &Dataset,
    ood: &Dataset,
    rules: &[Rule],
    eps: f64,
) -> Result<Vec<ScoreRow>> {
    check_sets(ind, ood)?;
    let mut rows = Vec::new();
    for (sample_index, (true_label, g)) in all_logits(model, ind, ood)?.into_iter().enumerate() {
        let pred_label = argmax(&g);
        for &rule in rules {
            rows.push(ScoreRow { sample_index, true_label, pred_label, rule, score: rule.score(&g, eps) });
        }
    }
    Ok(rows)
}

fn rows_for(rows: &[ScoreRow], rule: Rule) -> impl Iterator<Item = &ScoreRow> {
    rows.iter().filter(move |r| r.rule == rule)
}

/// OOD ranking set for one rule: InD samples are positives.
pub fn ood_score_set(rows: &[ScoreRow], rule: Rule) -> Result<ScoreSet> {
    let (scores, pos): (Vec<f64>, Vec<bool>) =
        rows_for(rows, rule).map(|r| (r.score, r.true_label != OOD_LABEL)).unzip();
    ScoreSet::new(scores, pos)
}

/// Misclassification set for one rule over the InD samples.
pub fn misd_score_set(rows: &[ScoreRow], rule: Rule) -> Result<ScoreSet> {
    let (scores, correct): (Vec<f64>, Vec<bool>) = rows_for(rows, rule)
        .filter(|r| r.true_label != OOD_LABEL)
        .map(|r| (r.score, r.pred_label as i64 == r.true_label))
        .unzip();
    ScoreSet::for_misd(scores, correct)
}

fn optional(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::MetricUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Builds the report from a score dump.
pub fn report_from_rows(rows: &[ScoreRow], rules: &[Rule], eps: f64, delta: f64) -> Result<MetricsReport> {
    let first = *rules.first().ok_or_else(|| Error::Config("no rejection rules requested".into()))?;
    let (num_ind, hits) = rows_for(rows, first)
        .filter(|r| r.true_label != OOD_LABEL)
        .fold((0usize, 0usize), |(n, h), r| (n + 1, h + (r.pred_label as i64 == r.true_label) as usize));
    let num_ood = rows_for(rows, first).filter(|r| r.true_label == OOD_LABEL).count();
    if num_ind == 0 || num_ood == 0 {
        return Err(Error::Input("evaluation needs both InD and OOD samples".into()));
    }

    let mut per_rule = BTreeMap::new();
    for &rule in rules {
        let ood_set = ood_score_set(rows, rule)?;
        let ood = OodMetrics {
            auroc: auroc(&ood_set)?,
            aupr: aupr(&ood_set)?,
            fpr95: fpr_at_tpr(&ood_set.flipped().negated(), FPR_TPR_TARGET)?,
        };
        let misd_set = misd_score_set(rows, rule)?;
        let (aurc, e_aurc) = aurc_eaurc(&misd_set)?;
        let misd = MisdMetrics {
            auroc: optional(auroc(&misd_set))?,
            fpr95: optional(fpr_at_tpr(&misd_set.flipped().negated(), FPR_TPR_TARGET))?,
            aurc,
            e_aurc,
            aurc_x1e3: aurc * 1e3,
            e_aurc_x1e3: e_aurc * 1e3,
        };
        per_rule.insert(rule.name().to_string(), RuleMetrics { ood, misd });
    }
    Ok(MetricsReport {
        accuracy: hits as f64 / num_ind as f64,
        per_rule,
        metadata: ReportMetadata { eps, delta, rules: rules.to_vec(), num_ind, num_ood },
    })
}

/// Scores both sets, builds the report, and applies the decision rule to every sample.
pub fn evaluate(
    model: &ModelParams,
    ind: &Dataset,
    ood: &Dataset,
    rules: &[Rule],
    eps: f64,
    delta: f64,
) -> Result<Evaluation> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::param("delta", format!("must lie in [0, 1], got {delta}")));
    }
    if !(eps >= 0.0) {
        return Err(Error::param("eps", format!("must be non-negative, got {eps}")));
    }
    let rows = score_rows(model, ind, ood, rules, eps)?;
    let report = report_from_rows(&rows, rules, eps, delta)?;
    let decisions = all_logits(model, ind, ood)?
        .into_iter()
        .enumerate()
        .map(|(sample_index, (true_label, g))| DecisionRow {
            sample_index,
            true_label,
            verdict: decide(&dste_combine(&g), delta, eps).verdict,
        })
        .collect();
    Ok(Evaluation { report, rows, decisions })
}

const SCORES_HEADER: &str = "sample_index,true_label,pred_label,score_rule,score_value";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = create(path)?;
    let write = || -> std::io::Result<()> {
        writeln!(out, "{header}")?;
        for line in lines {
            writeln!(out, "{line}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn write_scores_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        SCORES_HEADER,
        rows.iter()
            .map(|r| format!("{},{},{},{},{}", r.sample_index, r.true_label, r.pred_label, r.rule, fmt_real(r.score))),
    )
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let format_err = |line: u64, reason: String| Error::Format { path: path.to_path_buf(), line, reason };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| format_err(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
        return Err(format_err(1, format!("expected header `{SCORES_HEADER}`")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| format_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record[i].trim();
        let bad = |name: &str, value: &str| format_err(line, format!("invalid {name} `{value}`"));
        rows.push(ScoreRow {
            sample_index: field(0).parse().map_err(|_| bad("sample_index", field(0)))?,
            true_label: field(1).parse().map_err(|_| bad("true_label", field(1)))?,
            pred_label: field(2).parse().map_err(|_| bad("pred_label", field(2)))?,
            rule: field(3).parse().map_err(|_| bad("score_rule", field(3)))?,
            score: field(4).parse().map_err(|_| bad("score_value", field(4)))?,
        });
    }
    if rows.is_empty() {
        return Err(Error::NoSamples { path: path.to_path_buf() });
    }
    Ok(rows)
}

/// Rules present in a dump, in first-appearance order.
pub fn rules_in(rows: &[ScoreRow]) -> Vec<Rule> {
    let mut rules = Vec::new();
    for r in rows {
        if !rules.contains(&r.rule) {
            rules.push(r.rule);
        }
    }
    rules
}

/// OOD ROC curve (InD positive) for each rule: `score_rule,threshold,fpr,tpr`.
pub fn write_roc_csv(rows: &[ScoreRow], rules: &[Rule], path: impl AsRef<Path>) -> Result<()> {
    let mut lines = Vec::new();
    for &rule in rules {
        for p in roc_curve(&ood_score_set(rows, rule)?)? {
            lines.push(format!("{rule},{},{},{}", fmt_real(p.threshold), fmt_real(p.fpr), fmt_real(p.tpr)));
        }
    }
    write_lines(path.as_ref(), "score_rule,threshold,fpr,tpr", lines.into_iter())
}

/// Risk-coverage curve over the InD samples for each rule: `score_rule,threshold,coverage,risk`.
pub fn write_rc_csv(rows: &[ScoreRow], rules: &[Rule], path: impl AsRef<Path>) -> Result<()> {
    let mut lines = Vec::new();
    for &rule in rules {
        for p in risk_coverage(&misd_score_set(rows, rule)?)? {
            lines.push(format!("{rule},{},{},{}", fmt_real(p.threshold), fmt_real(p.coverage), fmt_real(p.risk)));
        }
    }
    write_lines(path.as_ref(), "score_rule,threshold,coverage,risk", lines.into_iter())
}

/// `sample_index,true_label,verdict,class` (class empty unless accepted).
pub fn write_decisions_csv(decisions: &[DecisionRow], path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        "sample_index,true_label,verdict,class",
        decisions.iter().map(|d| {
            let (verdict, class) = match d.verdict {
                Verdict::Accept(k) => ("accept", k.to_string()),
                Verdict::RejectOod => ("reject_ood", String::new()),
                Verdict::RejectMisclassification => ("reject_misclassification", String::new()),
            };
            format!("{},{},{verdict},{class}", d.sample_index, d.true_label)
        }),
    )
}

//! Reproducible experiments: one JSON config drives data generation,
//! training and evaluation, each reading and writing plain files in an
//! output directory.
//!
//! | step       | reads                                  | writes |
//! |------------|----------------------------------------|--------|
//! | `gen_data` | config                                 | `train.csv`, `ind_test.csv`, `ood_test.csv` |
//! | `train`    | `train.csv`                            | `model.json`, `train_log.jsonl` |
//! | `eval`     | model, `ind_test.csv`, `ood_test.csv`  | `metrics.json`, `scores.csv`, `roc.csv`, `rc.csv`, `decisions.csv` |
//! | `curves`   | `scores.csv`                           | `roc.csv`, `rc.csv` |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{gen_gaussian_mixture, gen_ood_ring, load_csv, save_csv, split_stratified, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, read_scores_csv, rules_in, write_decisions_csv, write_rc_csv, write_roc_csv, write_scores_csv, Evaluation,
};
use crate::model::ModelParams;
use crate::rejection::{Rule, DEFAULT_DELTA, DEFAULT_EPS};
use crate::rng::derive_seed;
use crate::trainer::{train, TrainConfig, TrainLog};

pub const TRAIN_CSV: &str = "train.csv";
pub const IND_TEST_CSV: &str = "ind_test.csv";
pub const OOD_TEST_CSV: &str = "ood_test.csv";
pub const MODEL_JSON: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const ROC_CSV: &str = "roc.csv";
pub const RC_CSV: &str = "rc.csv";
pub const DECISIONS_CSV: &str = "decisions.csv";

/// Gaussian-mixture InD data split per class into train/test, plus a ring of OOD points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    /// Samples generated per class before the train/test split.
    pub per_class: usize,
    pub train_fraction: f64,
    pub dim: usize,
    pub spread: f64,
    pub radius: f64,
    pub ood_count: usize,
    pub ood_inner_radius: f64,
    pub ood_outer_radius: f64,
}

impl Default for DataConfig {
    /// 4 classes, 500 train / 250 test per class, 1000 OOD points at radius 5..6.
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 750,
            train_fraction: 2.0 / 3.0,
            dim: 2,
            spread: 0.5,
            radius: 3.0,
            ood_count: 1000,
            ood_inner_radius: 5.0,
            ood_outer_radius: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub eps: f64,
    pub delta: f64,
    pub rules: Vec<Rule>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, delta: DEFAULT_DELTA, rules: Rule::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for data generation; training uses `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document (or starts from defaults) and applies
    /// `key=value` overrides, where `key` is a dotted path such as
    /// `train.epochs` and `value` is JSON (bare words are taken as strings).
    pub fn from_json_with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => {
                serde_json::from_str::<Value>(t).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?
            }
            None => serde_json::to_value(ExperimentConfig::default()).expect("default config serializes"),
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_overrides(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.eval.rules.is_empty() {
            return Err(Error::param("rules", "at least one rejection rule is required"));
        }
        if !(self.eval.eps >= 0.0) {
            return Err(Error::param("eps", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.eval.delta) {
            return Err(Error::param("delta", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) =
        item.split_once('=').ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override key `{key}`: `{}` is not a section", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override key in `{item}`")))
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::param("train_fraction", format!("must lie in (0, 1), got {}", self.train_fraction)));
        }
        let n_train = (self.train_fraction * self.per_class as f64).floor() as usize;
        if n_train < 1 || n_train >= self.per_class {
            return Err(Error::param(
                "train_fraction",
                format!("{} of {} samples per class leaves one side empty", self.train_fraction, self.per_class),
            ));
        }
        Ok(())
    }
}

/// Generated `(train, ind_test, ood_test)` sets.
pub fn generate_data(cfg: &DataConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    cfg.validate()?;
    let pool =
        gen_gaussian_mixture(cfg.num_classes, cfg.per_class, cfg.dim, cfg.spread, cfg.radius, derive_seed(seed, 1))?;
    let (train, test) =
        split_stratified(&pool, SplitSpec { train_fraction: cfg.train_fraction, seed: derive_seed(seed, 2) })?;
    let ood = gen_ood_ring(cfg.ood_count, cfg.dim, cfg.ood_inner_radius, cfg.ood_outer_radius, derive_seed(seed, 3))?;
    Ok((train, test, ood))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, ind, ood) = generate_data(&cfg.data, cfg.seed)?;
    ensure_dir(&cfg.out_dir)?;
    save_csv(&train, cfg.out_dir.join(TRAIN_CSV))?;
    save_csv(&ind, cfg.out_dir.join(IND_TEST_CSV))?;
    save_csv(&ood, cfg.out_dir.join(OOD_TEST_CSV))?;
    Ok((train, ind, ood))
}

fn load_known(path: PathBuf, k: usize) -> Result<Dataset> {
    load_csv(path)?.with_num_known_classes(k)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(ModelParams, TrainLog)> {
    let train_set = load_known(cfg.out_dir.join(TRAIN_CSV), cfg.data.num_classes)?;
    let (params, log) = train(&cfg.train, &train_set)?;
    params.save(cfg.out_dir.join(MODEL_JSON))?;
    log.save_jsonl(cfg.out_dir.join(TRAIN_LOG))?;
    Ok((params, log))
}

/// Evaluates an in-memory model and writes every evaluation artifact.
pub fn write_evaluation(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    ind: &Dataset,
    ood: &Dataset,
) -> Result<Evaluation> {
    let ev = evaluate(model, ind, ood, &cfg.eval.rules, cfg.eval.eps, cfg.eval.delta)?;
    ensure_dir(&cfg.out_dir)?;
    let metrics = cfg.out_dir.join(METRICS_JSON);
    fs::write(&metrics, ev.report.to_json()).map_err(|e| Error::io(&metrics, e))?;
    write_scores_csv(&ev.rows, cfg.out_dir.join(SCORES_CSV))?;
    write_roc_csv(&ev.rows, &cfg.eval.rules, cfg.out_dir.join(ROC_CSV))?;
    write_rc_csv(&ev.rows, &cfg.eval.rules, cfg.out_dir.join(RC_CSV))?;
    write_decisions_csv(&ev.decisions, cfg.out_dir.join(DECISIONS_CSV))?;
    Ok(ev)
}

pub fn cmd_eval(cfg: &ExperimentConfig, model_path: &Path) -> Result<Evaluation> {
    let model = ModelParams::load(model_path)?;
    let ind = load_known(cfg.out_dir.join(IND_TEST_CSV), model.num_classes())?;
    let ood = load_csv(cfg.out_dir.join(OOD_TEST_CSV))?;
    write_evaluation(cfg, &model, &ind, &ood)
}

/// Re-derives `roc.csv` and `rc.csv` in `out_dir` from a score dump.
pub fn cmd_curves(scores_path: &Path, out_dir: &Path) -> Result<()> {
    let rows = read_scores_csv(scores_path)?;
    let rules = rules_in(&rows);
    ensure_dir(out_dir)?;
    write_roc_csv(&rows, &rules, out_dir.join(ROC_CSV))?;
    write_rc_csv(&rows, &rules, out_dir.join(RC_CSV))
}

/// gen-data, train and eval in sequence.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Evaluation> {
    cmd_gen_data(cfg)?;
    cmd_train(cfg)?;
    cmd_eval(cfg, &cfg.out_dir.join(MODEL_JSON))
}

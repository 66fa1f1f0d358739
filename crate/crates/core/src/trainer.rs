//! Mini-batch SGD with heavy-ball momentum and a step learning-rate schedule.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{batch_loss_grad, GradientSet, LossBreakdown, LossConfig, Objective};
use crate::model::{init_params, Architecture, InitSpec, ModelParams, ThresholdMode};
use crate::rng::{derive_seed, Stream};

/// Optimizer and schedule from the CIFAR recipe: momentum optimizer starting
/// at 0.1, momentum 0.9, weight decay 2e-4, 200 epochs decayed by 0.1 at
/// epochs 100 and 150, batch 64 for prototype models.
pub mod cifar {
    pub const LR: f64 = 0.1;
    pub const MOMENTUM: f64 = 0.9;
    pub const WEIGHT_DECAY: f64 = 2e-4;
    pub const EPOCHS: usize = 200;
    pub const LR_DECAY_EPOCHS: [usize; 2] = [100, 150];
    pub const LR_DECAY_FACTOR: f64 = 0.1;
    pub const BATCH_SIZE: usize = 64;
    /// `(ξ, λ, β)` on CIFAR-10.
    pub const CIFAR10_XI_LAMBDA_BETA: (f64, f64, f64) = (20.0, 0.35, 0.95);
    /// `(ξ, λ, β)` on CIFAR-100.
    pub const CIFAR100_XI_LAMBDA_BETA: (f64, f64, f64) = (2.0, 0.05, 0.95);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub lambda_pl: f64,
    pub xi: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub threshold_mode: ThresholdMode,
    /// Hidden layer widths of the feature extractor.
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale hybrid run.
    fn default() -> Self {
        let (xi, lambda_pl, beta) = cifar::CIFAR100_XI_LAMBDA_BETA;
        Self {
            objective: Objective::Hybrid,
            beta,
            lambda_pl,
            xi,
            epochs: 60,
            batch_size: 64,
            lr: 0.005,
            momentum: cifar::MOMENTUM,
            weight_decay: cifar::WEIGHT_DECAY,
            lr_decay_epochs: vec![30, 45],
            lr_decay_factor: cifar::LR_DECAY_FACTOR,
            threshold_mode: ThresholdMode::LearnablePerClass,
            hidden: vec![32],
            feat_dim: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::param("xi", format!("must be positive, got {}", self.xi)));
        }
        if self.epochs < 1 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay", "must be non-negative"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("lr_decay_epochs", "must be strictly increasing"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::param("lr_decay_factor", "must be positive"));
        }
        if self.feat_dim < 1 || self.hidden.contains(&0) {
            return Err(Error::param("hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { objective: self.objective, beta: self.beta, lambda: self.lambda_pl }
    }

    /// The softmax baseline trains a linear head; every other objective uses prototypes.
    pub fn uses_linear_head(&self) -> bool {
        self.objective == Objective::Ce
    }
}

/// `lr · factor^(number of decay epochs ≤ epoch)`, epochs counted from 0.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr * cfg.lr_decay_factor.powi(decays as i32)
}

fn momentum_update(param: &mut f64, grad: f64, velocity: &mut f64, lr: f64, momentum: f64, decay: f64) {
    *velocity = momentum * *velocity + (grad + decay * *param);
    *param -= lr * *velocity;
}

fn update_matrix(p: &mut Array2<f64>, g: &Array2<f64>, v: &mut Array2<f64>, lr: f64, m: f64, decay: f64) -> Result<()> {
    if p.dim() != g.dim() || p.dim() != v.dim() {
        return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.dim(), g.dim())));
    }
    ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| momentum_update(p, g, v, lr, m, decay));
    Ok(())
}

fn update_vector(p: &mut Array1<f64>, g: &Array1<f64>, v: &mut Array1<f64>, lr: f64, m: f64) -> Result<()> {
    if p.len() != g.len() || p.len() != v.len() {
        return Err(Error::Shape(format!("parameter length {} vs gradient {}", p.len(), g.len())));
    }
    ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| momentum_update(p, g, v, lr, m, 0.0));
    Ok(())
}

/// `v ← momentum·v + (grad + weight_decay·param)`, `param ← param − lr·v`.
/// Weight decay applies to extractor and linear-head weights only; biases,
/// prototypes and thresholds are not decayed. A constant threshold is left
/// untouched; a shared one is updated once and broadcast.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    velocity: &mut GradientSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.layers.len() != grads.layers.len() || params.layers.len() != velocity.layers.len() {
        return Err(Error::Shape("layer count mismatch".into()));
    }
    for ((p, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
        update_matrix(&mut p.weight, &g.weight, &mut v.weight, lr, momentum, weight_decay)?;
        update_vector(&mut p.bias, &g.bias, &mut v.bias, lr, momentum)?;
    }
    match (&mut params.linear_head, &grads.linear_head, &mut velocity.linear_head) {
        (Some(p), Some(g), Some(v)) => {
            update_matrix(&mut p.weight, &g.weight, &mut v.weight, lr, momentum, weight_decay)?;
            update_vector(&mut p.bias, &g.bias, &mut v.bias, lr, momentum)?;
        }
        (None, None, None) => {}
        _ => return Err(Error::Shape("linear head presence differs".into())),
    }
    update_matrix(&mut params.prototypes, &grads.prototypes, &mut velocity.prototypes, lr, momentum, 0.0)?;
    match params.threshold_mode {
        ThresholdMode::ConstantShared => {}
        ThresholdMode::LearnablePerClass => {
            update_vector(&mut params.thresholds, &grads.thresholds, &mut velocity.thresholds, lr, momentum)?;
        }
        ThresholdMode::LearnableShared => {
            if params.thresholds.len() != grads.thresholds.len() || velocity.thresholds.len() != grads.thresholds.len()
            {
                return Err(Error::Shape("threshold count mismatch".into()));
            }
            let mut tau = params.thresholds[0];
            let mut vel = velocity.thresholds[0];
            momentum_update(&mut tau, grads.thresholds[0], &mut vel, lr, momentum, 0.0);
            params.thresholds.fill(tau);
            velocity.thresholds.fill(vel);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    /// First stage of a constant-threshold run: learns the shared threshold that is then frozen.
    SharedPretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub threshold_mode: ThresholdMode,
    pub lr: f64,
    pub train_accuracy: f64,
    pub loss: LossBreakdown,
    /// Thresholds at the end of the epoch.
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n").collect()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        out.write_all(self.to_jsonl().as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Fresh parameters for `cfg`, warm-started on `train_set`.
pub fn initial_params(cfg: &TrainConfig, train_set: &Dataset) -> Result<ModelParams> {
    let spec = InitSpec {
        arch: Architecture {
            dim_in: train_set.dim(),
            hidden: cfg.hidden.clone(),
            feat_dim: cfg.feat_dim,
            num_classes: train_set.num_known_classes(),
        },
        xi: cfg.xi,
        mode: match cfg.threshold_mode {
            ThresholdMode::ConstantShared => ThresholdMode::LearnableShared,
            mode => mode,
        },
        linear_head: cfg.uses_linear_head(),
    };
    init_params(&spec, train_set, derive_seed(cfg.seed, 0))
}

/// Trains from scratch. A constant-threshold run first trains with one
/// learnable shared threshold for `cfg.epochs` epochs, freezes the value it
/// reached, and continues training everything else for another
/// `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, train_set: &Dataset) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    train_set.ensure_known_labels()?;
    let mut params = initial_params(cfg, train_set)?;
    let mut log = TrainLog::default();
    if cfg.threshold_mode == ThresholdMode::ConstantShared {
        run_epochs(cfg, train_set, &mut params, Phase::SharedPretrain, derive_seed(cfg.seed, 1), &mut log)?;
        params = params.with_threshold_mode(ThresholdMode::ConstantShared)?;
        run_epochs(cfg, train_set, &mut params, Phase::Main, derive_seed(cfg.seed, 2), &mut log)?;
    } else {
        run_epochs(cfg, train_set, &mut params, Phase::Main, derive_seed(cfg.seed, 1), &mut log)?;
    }
    Ok((params, log))
}

fn run_epochs(
    cfg: &TrainConfig,
    train_set: &Dataset,
    params: &mut ModelParams,
    phase: Phase,
    shuffle_seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let loss_cfg = cfg.loss_config();
    let mut velocity = GradientSet::zeros_like(params);
    let mut stream = Stream::new(shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let n = train_set.len() as f64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        stream.shuffle(&mut order);
        let mut epoch_parts = Vec::new();
        let mut correct = 0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = batch_loss_grad(params, train_set, rows, &loss_cfg)?;
            if !batch.loss.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            epoch_parts.push(batch.loss.scaled(rows.len() as f64));
            correct += batch.correct;
            sgd_momentum_step(params, &batch.grad, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
        }
        if params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch: log.epochs.len(),
            phase,
            threshold_mode: params.threshold_mode,
            lr,
            train_accuracy: correct as f64 / n,
            loss: LossBreakdown::sum(&epoch_parts).scaled(1.0 / n),
            thresholds: params.thresholds.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::model::{Layer, LinearHead};
    use ndarray::array;

    fn tiny_params() -> ModelParams {
        ModelParams::from_parts(
            vec![Layer { weight: array![[1.0, 2.0]], bias: array![0.5] }],
            array![[1.0]],
            array![0.3],
            1.0,
            ThresholdMode::LearnablePerClass,
            Some(LinearHead { weight: array![[2.0]], bias: array![0.0] }),
        )
        .unwrap()
    }

    fn filled(p: &ModelParams, value: f64) -> GradientSet {
        let mut g = GradientSet::zeros_like(p);
        g.layers[0].weight.fill(value);
        g.layers[0].bias.fill(value);
        let head = g.linear_head.as_mut().unwrap();
        head.weight.fill(value);
        head.bias.fill(value);
        g.prototypes.fill(value);
        g.thresholds.fill(value);
        g
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = tiny_params();
        let before = p.clone();
        let zero = GradientSet::zeros_like(&p);
        let mut v = GradientSet::zeros_like(&p);
        sgd_momentum_step(&mut p, &zero, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = tiny_params();
        let before = p.flatten();
        let g = filled(&p, 0.5);
        let mut v = GradientSet::zeros_like(&p);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!((a - (b - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = tiny_params();
        let g = filled(&p, 1.0);
        let mut v = GradientSet::zeros_like(&p);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        let mid = p.flatten();
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        for (a, b) in p.flatten().iter().zip(&mid) {
            assert!((b - a - 0.1 * 1.9).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_skips_biases_prototypes_thresholds() {
        let mut p = tiny_params();
        let zero = GradientSet::zeros_like(&p);
        let mut v = GradientSet::zeros_like(&p);
        sgd_momentum_step(&mut p, &zero, &mut v, 0.1, 0.0, 0.5).unwrap();
        assert_eq!(p.layers[0].weight, array![[1.0 - 0.05, 2.0 - 0.1]]);
        assert_eq!(p.layers[0].bias, array![0.5]);
        assert_eq!(p.linear_head.as_ref().unwrap().weight, array![[2.0 - 0.1]]);
        assert_eq!(p.prototypes, array![[1.0]]);
        assert_eq!(p.thresholds, array![0.3]);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg =
            TrainConfig { lr: cifar::LR, lr_decay_epochs: cifar::LR_DECAY_EPOCHS.to_vec(), ..TrainConfig::default() };
        assert_eq!(lr_at_epoch(&cfg, 0), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 99), 0.1);
        assert!((lr_at_epoch(&cfg, 100) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 150) - 0.001).abs() < 1e-15);
        let flat = TrainConfig { lr_decay_epochs: vec![], ..cfg };
        assert_eq!(lr_at_epoch(&flat, 500), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { lr_decay_epochs: vec![5, 5], ..TrainConfig::default() },
            TrainConfig { beta: 2.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Parameter { .. })), "{bad:?}");
        }
    }

    fn quick_cfg(mode: ThresholdMode) -> TrainConfig {
        TrainConfig { epochs: 3, hidden: vec![8], feat_dim: 4, threshold_mode: mode, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let ds = gen_gaussian_mixture(3, 30, 2, 0.5, 3.0, 1).unwrap();
        for mode in [ThresholdMode::ConstantShared, ThresholdMode::LearnablePerClass] {
            let cfg = TrainConfig { lr: 0.0, epochs: 1, ..quick_cfg(mode) };
            let (p, log) = train(&cfg, &ds).unwrap();
            let init = initial_params(&cfg, &ds).unwrap();
            assert_eq!(p.flatten(), init.clone().with_threshold_mode(mode).unwrap().flatten());
            assert_eq!(log.epochs.len(), if mode == ThresholdMode::ConstantShared { 2 } else { 1 });
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_gaussian_mixture(3, 30, 2, 0.5, 3.0, 1).unwrap();
        let cfg = quick_cfg(ThresholdMode::LearnablePerClass);
        let (a, la) = train(&cfg, &ds).unwrap();
        let (b, lb) = train(&cfg, &ds).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(la.to_jsonl(), lb.to_jsonl());
    }

    #[test]
    fn shared_thresholds_stay_equal() {
        let ds = gen_gaussian_mixture(3, 30, 2, 0.5, 3.0, 1).unwrap();
        for mode in [ThresholdMode::ConstantShared, ThresholdMode::LearnableShared] {
            let (p, log) = train(&quick_cfg(mode), &ds).unwrap();
            for e in &log.epochs {
                assert!(e.thresholds.iter().all(|t| t.to_bits() == e.thresholds[0].to_bits()));
            }
            assert_eq!(p.threshold_mode, mode);
        }
    }

    #[test]
    fn constant_mode_freezes_the_pretrained_threshold() {
        let ds = gen_gaussian_mixture(3, 30, 2, 0.5, 3.0, 1).unwrap();
        let (_, log) = train(&quick_cfg(ThresholdMode::ConstantShared), &ds).unwrap();
        let (pre, main): (Vec<_>, Vec<_>) = log.epochs.iter().partition(|e| e.phase == Phase::SharedPretrain);
        assert_eq!((pre.len(), main.len()), (3, 3));
        let frozen = pre.last().unwrap().thresholds[0];
        assert!(main.iter().all(|e| e.thresholds[0] == frozen));
    }

    #[test]
    fn missing_class_fails_initialization() {
        let ds = gen_gaussian_mixture(3, 10, 2, 0.5, 3.0, 1).unwrap();
        let two = ds.select(&(0..20).collect::<Vec<_>>()).unwrap();
        assert!(matches!(train(&quick_cfg(ThresholdMode::LearnablePerClass), &two), Err(Error::Init(_))));
    }
}

//! Prototype classifier over a small MLP feature extractor.
//!
//! The extractor is a stack of affine layers with ReLU between them and no
//! activation after the last one. On top sit K prototypes `μ_i` with
//! thresholds `τ_i`, giving logits `g_i = -ξ (‖f - μ_i‖² - τ_i)` for a fixed
//! temperature `ξ`. A model may instead carry a plain linear head
//! (`g = W f + b`); it is used for the softmax baseline and, when present,
//! replaces the prototype logits.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// One threshold for all classes, held fixed.
    ConstantShared,
    /// One threshold for all classes, trained.
    LearnableShared,
    /// A trained threshold per class.
    LearnablePerClass,
}

impl ThresholdMode {
    pub fn is_shared(self) -> bool {
        !matches!(self, ThresholdMode::LearnablePerClass)
    }

    /// Number of free threshold parameters for `k` classes.
    pub fn free_thresholds(self, k: usize) -> usize {
        match self {
            ThresholdMode::ConstantShared => 0,
            ThresholdMode::LearnableShared => 1,
            ThresholdMode::LearnablePerClass => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `K × feat_dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim_in: usize,
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.dim_in).chain(self.hidden.iter().copied()).chain(std::iter::once(self.feat_dim)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    /// `K × feat_dim`, one prototype per class.
    pub prototypes: Array2<f64>,
    pub thresholds: Array1<f64>,
    pub threshold_mode: ThresholdMode,
    pub linear_head: Option<LinearHead>,
    temperature: f64,
}

/// Intermediates of one pass through the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrace {
    pub input: Array1<f64>,
    pub pre_activations: Vec<Array1<f64>>,
    /// Layer outputs; the last entry is the feature vector.
    pub activations: Vec<Array1<f64>>,
}

impl FeatureTrace {
    pub fn features(&self) -> &Array1<f64> {
        self.activations.last().unwrap_or(&self.input)
    }
}

/// Full forward pass: extractor intermediates, squared prototype distances and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub features: FeatureTrace,
    pub sq_distances: Array1<f64>,
    pub logits: Array1<f64>,
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

impl ModelParams {
    /// Assembles parameters, checking shapes and the threshold-mode constraint.
    pub fn from_parts(
        layers: Vec<Layer>,
        prototypes: Array2<f64>,
        thresholds: Array1<f64>,
        temperature: f64,
        threshold_mode: ThresholdMode,
        linear_head: Option<LinearHead>,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::param("xi", format!("temperature must be positive, got {temperature}")));
        }
        if layers.is_empty() {
            return Err(Error::Shape("extractor needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(Error::Shape(format!("layer {} input does not match layer {l} output", l + 1)));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::Shape(format!("layer {l} bias length")));
            }
        }
        let feat_dim = layers.last().unwrap().weight.nrows();
        let k = prototypes.nrows();
        if k == 0 || prototypes.ncols() != feat_dim {
            return Err(Error::Shape(format!("prototypes are {:?}, expected K × {feat_dim}", prototypes.dim())));
        }
        if thresholds.len() != k {
            return Err(Error::Shape(format!("{} thresholds for {k} prototypes", thresholds.len())));
        }
        if threshold_mode.is_shared() && thresholds.iter().any(|t| t.to_bits() != thresholds[0].to_bits()) {
            return Err(Error::Config("shared threshold modes need identical thresholds".into()));
        }
        if let Some(head) = &linear_head {
            if head.weight.dim() != (k, feat_dim) || head.bias.len() != k {
                return Err(Error::Shape("linear head does not match K × feat_dim".into()));
            }
        }
        Ok(Self { layers, prototypes, thresholds, threshold_mode, linear_head, temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn dim_in(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dim_in: self.dim_in(),
            hidden: self.layers[..self.layers.len() - 1].iter().map(|l| l.weight.nrows()).collect(),
            feat_dim: self.feat_dim(),
            num_classes: self.num_classes(),
        }
    }

    /// Runs the extractor on one input.
    pub fn extract_features(&self, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, FeatureTrace)> {
        if x.len() != self.dim_in() {
            return Err(Error::Shape(format!("input has {} entries, expected {}", x.len(), self.dim_in())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite model input".into()));
        }
        let input = x.to_owned();
        let last = self.layers.len() - 1;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Array1<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().unwrap_or(&input);
            let z = layer.weight.dot(prev) + &layer.bias;
            let a = if l == last { z.clone() } else { z.mapv(relu) };
            pre_activations.push(z);
            activations.push(a);
        }
        let f = activations[last].clone();
        Ok((f, FeatureTrace { input, pre_activations, activations }))
    }

    /// `‖f - μ_i‖²` for every class.
    pub fn sq_distances(&self, f: ArrayView1<'_, f64>) -> Array1<f64> {
        self.prototypes
            .rows()
            .into_iter()
            .map(|mu| mu.iter().zip(f.iter()).map(|(m, x)| (x - m) * (x - m)).sum())
            .collect()
    }

    /// Prototype logits `g_i = -ξ (‖f - μ_i‖² - τ_i)`.
    pub fn discriminant_cpn(&self, f: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_feature_len(f.len())?;
        Ok(self.cpn_from_distances(&self.sq_distances(f)))
    }

    pub(crate) fn cpn_from_distances(&self, d: &Array1<f64>) -> Array1<f64> {
        let xi = self.temperature;
        d.iter().zip(&self.thresholds).map(|(d, t)| -xi * (d - t)).collect()
    }

    /// Linear logits `g_i = w_i · f + b_i`.
    pub fn discriminant_linear(&self, f: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_feature_len(f.len())?;
        let head = self.linear_head.as_ref().ok_or_else(|| Error::Config("model has no linear head".into()))?;
        Ok(head.weight.dot(&f) + &head.bias)
    }

    fn check_feature_len(&self, len: usize) -> Result<()> {
        if len != self.feat_dim() {
            return Err(Error::Shape(format!("feature has {len} entries, expected {}", self.feat_dim())));
        }
        Ok(())
    }

    /// Forward pass to the model's logits (linear head if present, prototypes otherwise).
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<ForwardTrace> {
        let (f, features) = self.extract_features(x)?;
        let sq_distances = self.sq_distances(f.view());
        let logits = match &self.linear_head {
            Some(head) => head.weight.dot(&f) + &head.bias,
            None => self.cpn_from_distances(&sq_distances),
        };
        Ok(ForwardTrace { features, sq_distances, logits })
    }

    pub fn logits(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Trainable parameters as one flat vector: layers (weight row-major,
    /// then bias), linear head, prototypes, and finally the free thresholds
    /// (K, 1 or none depending on the mode).
    pub fn flatten(&self) -> Vec<f64> {
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
        let free = self.threshold_mode.free_thresholds(self.num_classes());
        out.extend(self.thresholds.iter().take(free));
        out
    }

    /// Inverse of [`flatten`](Self::flatten). A shared threshold is broadcast to every class.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.flatten().len();
        if values.len() != expected {
            return Err(Error::Shape(format!("{} values for {expected} parameters", values.len())));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        if let Some(head) = &mut self.linear_head {
            head.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            head.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        self.prototypes.iter_mut().for_each(|m| *m = it.next().unwrap());
        match self.threshold_mode {
            ThresholdMode::ConstantShared => {}
            ThresholdMode::LearnableShared => self.thresholds.fill(it.next().unwrap()),
            ThresholdMode::LearnablePerClass => self.thresholds.iter_mut().for_each(|t| *t = it.next().unwrap()),
        }
        Ok(())
    }

    /// Same parameters with a different threshold mode. Moving into a shared
    /// mode requires the thresholds to be equal already.
    pub fn with_threshold_mode(mut self, mode: ThresholdMode) -> Result<Self> {
        if mode.is_shared() && self.thresholds.iter().any(|t| t.to_bits() != self.thresholds[0].to_bits()) {
            return Err(Error::Config("thresholds differ; cannot switch to a shared mode".into()));
        }
        self.threshold_mode = mode;
        Ok(self)
    }
}

/// Everything needed to build a fresh model.
#[derive(Clone, Debug, PartialEq)]
pub struct InitSpec {
    pub arch: Architecture,
    pub xi: f64,
    pub mode: ThresholdMode,
    pub linear_head: bool,
}

/// Draws extractor weights from `N(0, 2 / fan_in)` (biases zero), then
/// warm-starts the prototypes at the per-class mean warmup feature and each
/// threshold at the class's mean squared distance to its prototype. Shared
/// modes use the average of the per-class thresholds.
pub fn init_params(spec: &InitSpec, warmup: &Dataset, seed: u64) -> Result<ModelParams> {
    let arch = &spec.arch;
    if arch.dim_in < 1 || arch.feat_dim < 1 || arch.num_classes < 1 || arch.hidden.contains(&0) {
        return Err(Error::param("architecture", "all layer sizes and K must be positive"));
    }
    if warmup.dim() != arch.dim_in {
        return Err(Error::Shape(format!("warmup has dimension {}, model expects {}", warmup.dim(), arch.dim_in)));
    }
    warmup.ensure_known_labels()?;

    let mut stream = Stream::new(seed);
    let sizes = arch.layer_sizes();
    let layers: Vec<Layer> = sizes
        .windows(2)
        .map(|w| Layer { weight: he_normal(&mut stream, w[1], w[0]), bias: Array1::zeros(w[1]) })
        .collect();
    let linear_head = spec.linear_head.then(|| LinearHead {
        weight: he_normal(&mut stream, arch.num_classes, arch.feat_dim),
        bias: Array1::zeros(arch.num_classes),
    });

    let k = arch.num_classes;
    let m = arch.feat_dim;
    let mut params = ModelParams::from_parts(
        layers,
        Array2::zeros((k, m)),
        Array1::zeros(k),
        spec.xi,
        ThresholdMode::LearnablePerClass,
        linear_head,
    )?;

    let mut feats = Vec::with_capacity(warmup.len());
    let mut sums = Array2::<f64>::zeros((k, m));
    let mut counts = vec![0usize; k];
    for i in 0..warmup.len() {
        let (f, _) = params.extract_features(warmup.row(i))?;
        let y = warmup.labels()[i] as usize;
        if y >= k {
            return Err(Error::Label { label: y as i64, num_classes: k });
        }
        sums.row_mut(y).scaled_add(1.0, &f);
        counts[y] += 1;
        feats.push((y, f));
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Init(format!("class {missing} has no warmup samples")));
    }
    for (c, mut row) in sums.rows_mut().into_iter().enumerate() {
        row /= counts[c] as f64;
    }
    let mut spread = Array1::<f64>::zeros(k);
    for (y, f) in &feats {
        let diff = f - &sums.row(*y);
        spread[*y] += diff.dot(&diff);
    }
    for c in 0..k {
        spread[c] /= counts[c] as f64;
    }
    if spec.mode.is_shared() {
        let shared = spread.sum() / k as f64;
        spread.fill(shared);
    }
    params.prototypes = sums;
    params.thresholds = spread;
    params.threshold_mode = spec.mode;
    Ok(params)
}

fn he_normal(stream: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / cols as f64).sqrt();
    let mut w = Array2::zeros((rows, cols));
    w.iter_mut().for_each(|v| *v = std * stream.normal());
    w
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl MatrixRecord {
    fn from(m: &Array2<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), values: m.iter().copied().collect() }
    }

    fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.values)
            .map_err(|e| Error::Shape(format!("checkpoint matrix: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weight: MatrixRecord,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    architecture: Architecture,
    threshold_mode: ThresholdMode,
    temperature: f64,
    layers: Vec<LayerRecord>,
    prototypes: MatrixRecord,
    thresholds: Vec<f64>,
    linear_head: Option<LayerRecord>,
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let record = |w: &Array2<f64>, b: &Array1<f64>| LayerRecord { weight: MatrixRecord::from(w), bias: b.to_vec() };
        let ckpt = Checkpoint {
            architecture: self.architecture(),
            threshold_mode: self.threshold_mode,
            temperature: self.temperature,
            layers: self.layers.iter().map(|l| record(&l.weight, &l.bias)).collect(),
            prototypes: MatrixRecord::from(&self.prototypes),
            thresholds: self.thresholds.to_vec(),
            linear_head: self.linear_head.as_ref().map(|h| record(&h.weight, &h.bias)),
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(CheckpointError::Json)?;
        let layers = ckpt
            .layers
            .into_iter()
            .map(|l| Ok(Layer { weight: l.weight.into_array()?, bias: Array1::from(l.bias) }))
            .collect::<Result<Vec<_>>>()?;
        let linear_head = match ckpt.linear_head {
            Some(h) => Some(LinearHead { weight: h.weight.into_array()?, bias: Array1::from(h.bias) }),
            None => None,
        };
        let params = ModelParams::from_parts(
            layers,
            ckpt.prototypes.into_array()?,
            Array1::from(ckpt.thresholds),
            ckpt.temperature,
            ckpt.threshold_mode,
            linear_head,
        )?;
        if params.architecture() != ckpt.architecture {
            return Err(Error::Shape("checkpoint architecture does not match its arrays".into()).into());
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CheckpointError::Json(source) => Error::Json { path: path.to_path_buf(), source },
            CheckpointError::Model(err) => err,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Json(serde_json::Error),
    #[error(transparent)]
    Model(#[from] Error),
}

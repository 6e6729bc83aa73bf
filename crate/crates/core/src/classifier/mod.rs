//! Classifier adapter contract and the in-repo adapters.
//!
//! Attribution and faithfulness code only ever talks to a
//! [`ClassifierAdapter`]. Three adapters ship with the crate: a pixel-blind
//! [`StubClassifier`] with fixed logits, the trainable [`ToyCnn`], and
//! [`ExternalClassifier`] which forwards to a separate process.

mod toy_cnn;
mod train;

pub use toy_cnn::{ToyCnn, ToyCnnShape};
pub use train::{train_classifier, EpochRecord, TrainConfig, TrainError, TrainReport};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::external::{self, ExternalError, ExternalProcess, ExternalSpec};
use crate::ingest::ImageTensor;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("input is {got_h}x{got_w}, model expects {expected}x{expected}")]
    ShapeMismatch {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("classifier does not expose `{0}`")]
    CapabilityMissing(&'static str),
    #[error("classifier backend failure: {0}")]
    BackendFailure(String),
}

impl From<ExternalError> for ClassifierError {
    fn from(e: ExternalError) -> Self {
        ClassifierError::BackendFailure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub probabilities: bool,
    pub input_gradients: bool,
    pub activation_maps: bool,
}

/// Activations of the last spatial layer and the gradient of the target
/// logit with respect to them, both laid out `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGradients {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activations: Vec<f32>,
    pub gradients: Vec<f32>,
}

pub trait ClassifierAdapter: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_side(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    /// `false` when calls must not overlap; the pipeline then runs the
    /// stage that uses this adapter on a single worker.
    fn concurrent(&self) -> bool {
        true
    }

    /// Raw class scores for a preprocessed input of side `input_side()`.
    fn logits(&self, x: &ImageTensor) -> Result<Vec<f64>>;

    fn activation_gradients(&self, _x: &ImageTensor, _target: usize) -> Result<ActivationGradients> {
        Err(ClassifierError::CapabilityMissing("activation_maps"))
    }

    /// Gradient of the target logit with respect to each input value,
    /// same layout as `x.data`.
    fn input_gradients(&self, _x: &ImageTensor, _target: usize) -> Result<Vec<f32>> {
        Err(ClassifierError::CapabilityMissing("input_gradients"))
    }
}

pub fn check_input(model: &dyn ClassifierAdapter, x: &ImageTensor) -> Result<()> {
    let side = model.input_side();
    if x.height != side || x.width != side {
        return Err(ClassifierError::ShapeMismatch {
            expected: side,
            got_h: x.height,
            got_w: x.width,
        });
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn predict_proba(model: &dyn ClassifierAdapter, x: &ImageTensor) -> Result<Vec<f64>> {
    check_input(model, x)?;
    let logits = model.logits(x)?;
    if logits.len() != model.num_classes() {
        return Err(ClassifierError::BackendFailure(format!(
            "adapter returned {} logits for {} classes",
            logits.len(),
            model.num_classes()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(ClassifierError::BackendFailure("non-finite logits".into()));
    }
    Ok(softmax(&logits))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_top1(model: &dyn ClassifierAdapter, x: &ImageTensor) -> Result<(usize, f64)> {
    let p = predict_proba(model, x)?;
    let k = argmax(&p);
    Ok((k, p[k]))
}

/// Ignores its input and always returns the same logits.
#[derive(Debug, Clone)]
pub struct StubClassifier {
    logits: Vec<f64>,
    side: usize,
}

impl StubClassifier {
    pub fn new(logits: Vec<f64>, side: usize) -> Self {
        assert!(!logits.is_empty());
        Self { logits, side }
    }

    pub fn uniform(num_classes: usize, side: usize) -> Self {
        Self::new(vec![0.0; num_classes], side)
    }
}

impl ClassifierAdapter for StubClassifier {
    fn num_classes(&self) -> usize {
        self.logits.len()
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            probabilities: true,
            ..Default::default()
        }
    }

    fn logits(&self, _x: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.logits.clone())
    }
}

/// Adapter backed by an external process speaking the protocol in
/// [`crate::external`].
pub struct ExternalClassifier {
    process: ExternalProcess,
    num_classes: usize,
    side: usize,
    capabilities: Capabilities,
}

impl ExternalClassifier {
    pub fn spawn(spec: &ExternalSpec) -> Result<Self> {
        let process = ExternalProcess::spawn("classifier", spec)?;
        let desc = process.call(&json!({"op": "describe"}))?;
        let field = |k: &str| {
            desc.get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| process.protocol(format!("describe: missing `{k}`")))
        };
        let num_classes = field("num_classes")?;
        let side = field("input_side")?;
        let caps: Vec<String> = desc
            .get("capabilities")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        let has = |c: &str| caps.iter().any(|s| s == c);
        Ok(Self {
            num_classes,
            side,
            capabilities: Capabilities {
                probabilities: true,
                input_gradients: has("input_gradients"),
                activation_maps: has("activation_maps"),
            },
            process,
        })
    }
}

impl ClassifierAdapter for ExternalClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn concurrent(&self) -> bool {
        false
    }

    fn logits(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let reply = self
            .process
            .call(&json!({"op": "logits", "image": external::image_payload(x)}))?;
        external::f64_list(&reply, "logits")
            .ok_or_else(|| self.process.protocol("logits: expected a number list").into())
    }

    fn input_gradients(&self, x: &ImageTensor, target: usize) -> Result<Vec<f32>> {
        if !self.capabilities.input_gradients {
            return Err(ClassifierError::CapabilityMissing("input_gradients"));
        }
        let reply = self.process.call(&json!({
            "op": "input_gradients", "image": external::image_payload(x), "target": target
        }))?;
        let g = external::f64_list(&reply, "gradients")
            .ok_or_else(|| ClassifierError::from(self.process.protocol("gradients: expected a number list")))?;
        if g.len() != x.data.len() {
            return Err(ClassifierError::BackendFailure("gradient length mismatch".into()));
        }
        Ok(g.into_iter().map(|v| v as f32).collect())
    }
}

/// Which adapter `classifier.backend` names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "toy-cnn")]
    ToyCnn,
    #[serde(rename = "stub")]
    Stub,
    #[serde(rename = "external")]
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backend: BackendKind,
    /// Weights file for `toy-cnn` (written by `train`).
    pub weights: PathBuf,
    pub toy_cnn: ToyCnnShape,
    pub stub_logits: Vec<f64>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalSpec>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::ToyCnn,
            weights: PathBuf::from("models/toy-cnn.json"),
            toy_cnn: ToyCnnShape::default(),
            stub_logits: vec![0.0, 0.0, 0.0],
            train: TrainConfig::default(),
            external: None,
        }
    }
}

/// Builds the adapter named in the config. `base` resolves relative paths.
pub fn load_adapter(config: &ClassifierConfig, input_side: usize, base: &Path) -> Result<Box<dyn ClassifierAdapter>> {
    match config.backend {
        BackendKind::Stub => Ok(Box::new(StubClassifier::new(config.stub_logits.clone(), input_side))),
        BackendKind::ToyCnn => {
            let path = base.join(&config.weights);
            let model =
                ToyCnn::load(&path).map_err(|e| ClassifierError::BackendFailure(format!("{}: {e}", path.display())))?;
            if model.input_side() != input_side {
                return Err(ClassifierError::BackendFailure(format!(
                    "weights expect side {}, config says {input_side}",
                    model.input_side()
                )));
            }
            Ok(Box::new(model))
        }
        BackendKind::External => {
            let spec = config
                .external
                .clone()
                .ok_or_else(|| ClassifierError::BackendFailure("classifier.external is not configured".into()))?;
            let spec = ExternalSpec {
                program: base.join(&spec.program),
                weights: spec.weights.map(|w| base.join(w)),
                ..spec
            };
            Ok(Box::new(ExternalClassifier::spawn(&spec)?))
        }
    }
}

//! Desk-scale trainer for [`ToyCnn`]: label-smoothed cross-entropy, AdamW,
//! early stopping on a seeded validation split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{argmax, ClassifierAdapter, ToyCnn, ToyCnnShape};
use crate::config::{config_hash, derive_seed};
use crate::ingest::{
    self, AugmentConfig, DatasetManifest, ImageTensor, IngestError, Normalization, PreprocessConfig, Split,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split unusable: {0}")]
    EmptySplit(String),
    #[error("validation loss became NaN at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of train records held out for early stopping.
    pub validation_fraction: f64,
    /// Apply flip and color jitter to training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.02,
            label_smoothing: 0.1,
            max_epochs: 300,
            patience: 30,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return bad("max_epochs, patience and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub num_train: usize,
    pub num_val: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl AdamW {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f32, weight_decay: f32) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + Self::EPS) + weight_decay * params[i]);
        }
    }
}

fn smoothed_target(label: usize, n: usize, smoothing: f64) -> Vec<f64> {
    let mut q = vec![smoothing / n as f64; n];
    q[label] += 1.0 - smoothing;
    q
}

/// Mean loss and accuracy without augmentation.
fn evaluate(
    model: &ToyCnn,
    samples: &[(ImageTensor, usize)],
    preprocess: &PreprocessConfig,
    smoothing: f64,
) -> (f64, f64) {
    let n = model.num_classes();
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|(raw, label)| {
            let x = ingest::model_input(raw, preprocess);
            let (loss, _) = model.loss_and_grad(&x.data, &smoothed_target(*label, n, smoothing));
            let pred = argmax(&model.logits_raw(&x.data));
            (loss, pred == *label)
        })
        .collect();
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let acc = per.iter().filter(|p| p.1).count() as f64 / per.len() as f64;
    (loss, acc)
}

/// Trains a fresh [`ToyCnn`] on raw `[0,1]` tensors.
pub fn train_on_tensors(
    samples: Vec<(ImageTensor, usize)>,
    num_classes: usize,
    shape: ToyCnnShape,
    config: &TrainConfig,
    preprocess: &PreprocessConfig,
    augment: &AugmentConfig,
) -> Result<(ToyCnn, TrainReport), TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("no training records".into()));
    }
    let mut per_class = vec![0usize; num_classes];
    for (_, l) in &samples {
        per_class[*l] += 1;
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(TrainError::EmptySplit(format!("class {c} has no training records")));
    }
    let raw_cfg = PreprocessConfig {
        normalization: Normalization::Raw01,
        ..preprocess.clone()
    };
    let hash = config_hash(&(config, &raw_cfg, preprocess.normalization, augment, shape));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (samples.len() as f64 * config.validation_fraction).round() as usize;
    let mut samples: Vec<Option<(ImageTensor, usize)>> = samples.into_iter().map(Some).collect();
    let val: Vec<(ImageTensor, usize)> = order[..n_val].iter().map(|&i| samples[i].take().unwrap()).collect();
    let train: Vec<(ImageTensor, usize)> = order[n_val..].iter().map(|&i| samples[i].take().unwrap()).collect();

    let side = preprocess.side;
    let mut model = ToyCnn::new(num_classes, side, shape, config.seed);
    let mut opt = AdamW::new(model.params().len());
    let mut best = (f64::INFINITY, model.params().to_vec(), 0usize);
    let mut since_best = 0usize;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.max_epochs {
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            "epoch",
            epoch as u64,
        )));
        let mut loss_sum = 0.0f64;
        for batch in indices.chunks(config.batch_size) {
            let per_sample: Vec<(f64, Vec<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let (raw, label) = &train[i];
                    let input = if config.augment {
                        let s = derive_seed(config.seed, "augment", (epoch * train.len() + i) as u64);
                        ingest::augment(raw, Split::Train, s, augment).expect("train split")
                    } else {
                        raw.clone()
                    };
                    let x = ingest::model_input(&input, preprocess);
                    model.loss_and_grad(&x.data, &smoothed_target(*label, num_classes, config.label_smoothing))
                })
                .collect();
            let mut grad = vec![0.0f32; model.params().len()];
            for (loss, g) in &per_sample {
                loss_sum += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.update(
                model.params_mut(),
                &grad,
                config.learning_rate as f32,
                config.weight_decay as f32,
            );
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&model, &val, preprocess, config.label_smoothing);
            (Some(l), Some(a))
        };
        tracing::info!(epoch, train_loss, ?val_loss, ?val_accuracy, "epoch done");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() || !train_loss.is_finite() || !model.params().iter().all(|v| v.is_finite()) {
            return Err(TrainError::DivergenceDetected { epoch });
        }
        if monitored < best.0 {
            best = (monitored, model.params().to_vec(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.params_mut().copy_from_slice(&best.1);
    let (_, final_train_accuracy) = evaluate(&model, &train, preprocess, config.label_smoothing);
    let final_val_accuracy = (!val.is_empty()).then(|| evaluate(&model, &val, preprocess, config.label_smoothing).1);
    Ok((
        model,
        TrainReport {
            seed: config.seed,
            config_hash: hash,
            num_train: train.len(),
            num_val: val.len(),
            epochs,
            best_epoch: best.2,
            stopped_early,
            final_train_accuracy,
            final_val_accuracy,
        },
    ))
}

/// Loads the train split of `manifest` and trains on it.
pub fn train_classifier(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    shape: ToyCnnShape,
    config: &TrainConfig,
    preprocess: &PreprocessConfig,
    augment: &AugmentConfig,
) -> Result<(ToyCnn, TrainReport), TrainError> {
    let raw_cfg = PreprocessConfig {
        normalization: Normalization::Raw01,
        ..preprocess.clone()
    };
    let records: Vec<_> = manifest.split(Split::Train).collect();
    let samples = records
        .par_iter()
        .map(|r| {
            let img = ingest::load_image(&ingest::resolve_uri(manifest_path, &r.uri))?;
            Ok((ingest::preprocess(&img, &raw_cfg)?, r.label))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    train_on_tensors(samples, manifest.num_classes, shape, config, preprocess, augment)
}

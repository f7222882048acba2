use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{CalipHyper, ForwardOptions};
use crate::error::{CalipError, Result};
use crate::store::FeatureBundle;
use crate::tensor::{argmax, Mat, SpatialMap};

use super::engine::{self, Prepared};
use super::{check_params, ProjectionMask, ProjectionParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// `lr * 0.5 * (1 + cos(pi * epoch / epochs))`, reaching 0 after the last epoch.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Logit scale inside the cross-entropy.
    pub ce_temperature: f32,
    pub hyper: CalipHyper,
    pub schedule: LrSchedule,
    pub mask: ProjectionMask,
    pub options: ForwardOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            ce_temperature: 100.0,
            hyper: CalipHyper::default(),
            schedule: LrSchedule::Cosine,
            mask: ProjectionMask::ALL,
            options: ForwardOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CalipError::param("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(CalipError::param("batch_size", "must be >= 1"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(CalipError::param("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.ce_temperature <= 0.0 || !self.ce_temperature.is_finite() {
            return Err(CalipError::param(
                "ce_temperature",
                format!("must be > 0, got {}", self.ce_temperature),
            ));
        }
        self.hyper.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.lr as f64;
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ProjectionParams,
    /// Mean mini-batch loss of every epoch.
    pub loss_trace: Vec<f64>,
    /// Mean loss over the training set before the first step.
    pub initial_loss: f64,
    /// Mean loss over the training set after the last step.
    pub final_loss: f64,
    /// Training accuracy (percent) of the final parameters.
    pub train_accuracy: f64,
}

/// Cross-entropy of `softmax(ce_temperature * logits)` against `label`.
pub fn fs_loss(logits_fused: &Mat, label: usize, ce_temperature: f32) -> Result<f64> {
    if logits_fused.rows() != 1 {
        return Err(CalipError::dim(
            "fs_loss",
            format!("{}x{}", logits_fused.rows(), logits_fused.cols()),
            "a single row of logits",
        ));
    }
    if label >= logits_fused.cols() {
        return Err(CalipError::param(
            "label",
            format!("{label} out of range for K = {}", logits_fused.cols()),
        ));
    }
    if ce_temperature <= 0.0 || ce_temperature.is_nan() {
        return Err(CalipError::param("ce_temperature", "must be > 0"));
    }
    Ok(engine::cross_entropy(logits_fused, label, ce_temperature as f64).0)
}

/// Mean loss and mean gradient over prepared samples. Per-sample work fans
/// out over the rayon pool; the reduction runs in sample order.
pub(crate) fn batch_gradients(
    preps: &[&Prepared<f32>],
    labels: &[usize],
    text: &Mat,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<(f64, ProjectionParams)> {
    let per_sample: Vec<Result<(f64, ProjectionParams)>> = preps
        .par_iter()
        .zip(labels.par_iter())
        .map(|(prep, &label)| {
            let trace = engine::forward(prep, text, params, &config.hyper, config.mask, config.options)?;
            engine::backward(
                prep,
                text,
                params,
                &trace,
                label,
                config.ce_temperature as f64,
                &config.hyper,
                config.mask,
                config.options,
            )
        })
        .collect();

    let c = text.cols();
    let mut sum = ProjectionParams::<f64>::zeros(c);
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        sum.add_scaled(&g.cast(), 1.0);
    }
    let n = preps.len() as f64;
    let mut mean = ProjectionParams::<f64>::zeros(c);
    mean.add_scaled(&sum, 1.0 / n);
    Ok((loss / n, mean.cast()))
}

/// Mean-over-batch gradient of the loss w.r.t. every projection parameter.
/// Features are constants.
pub fn fs_backward(
    batch: &[(&SpatialMap, usize)],
    f_t: &Mat,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<ProjectionParams> {
    fs_backward_with_loss(batch, f_t, params, config).map(|(_, g)| g)
}

pub(crate) fn fs_backward_with_loss(
    batch: &[(&SpatialMap, usize)],
    f_t: &Mat,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<(f64, ProjectionParams)> {
    if batch.is_empty() {
        return Err(CalipError::Protocol("gradient of an empty batch".into()));
    }
    config.validate()?;
    check_params(params, f_t)?;
    let text = engine::prepare_text::<f32>(f_t);
    let mut preps = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (spatial, label) in batch {
        if spatial.c() != f_t.cols() {
            return Err(CalipError::dim(
                "fs_backward",
                format!("spatial channels {}", spatial.c()),
                format!("text channels {}", f_t.cols()),
            ));
        }
        if *label >= f_t.rows() {
            return Err(CalipError::param(
                "label",
                format!("{label} out of range for K = {}", f_t.rows()),
            ));
        }
        preps.push(engine::prepare(spatial, &text, config.options)?);
        labels.push(*label);
    }
    let refs: Vec<&Prepared<f32>> = preps.iter().collect();
    batch_gradients(&refs, &labels, &text, params, config)
}

fn mean_loss_and_accuracy(
    preps: &[Prepared<f32>],
    labels: &[usize],
    text: &Mat,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, bool)>> = preps
        .par_iter()
        .zip(labels.par_iter())
        .map(|(prep, &label)| {
            let tr = engine::forward(prep, text, params, &config.hyper, config.mask, config.options)?;
            let (loss, _) = engine::cross_entropy(&tr.logits_fused, label, config.ce_temperature as f64);
            Ok((loss, argmax(tr.logits_fused.data()) == label))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (l, ok) = r?;
        loss += l;
        correct += ok as usize;
    }
    let n = preps.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

/// Trains projection parameters on every image of `train`.
///
/// Deterministic in `config.seed`: the same generator draws the initial
/// weights and then every epoch's shuffle.
pub fn fs_train(train: &FeatureBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(CalipError::Protocol("training set is empty".into()));
    }
    for (class, idx) in train.indices_by_class().iter().enumerate() {
        if idx.is_empty() {
            return Err(CalipError::Protocol(format!(
                "class {:?} has no training samples",
                train.class_names()[class]
            )));
        }
    }

    let c = train.channels();
    let text = engine::prepare_text::<f32>(train.text());
    let preps: Vec<Prepared<f32>> = train
        .images()
        .par_iter()
        .map(|img| engine::prepare(&img.spatial, &text, config.options))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train.images().iter().map(|i| i.label as usize).collect();

    let mut rng = crate::synth::rng(config.seed);
    let mut params = ProjectionParams::init_scaled(c, 1.0 / (c as f64).sqrt(), &mut rng);
    let (initial_loss, _) = mean_loss_and_accuracy(&preps, &labels, &text, &params, config)?;

    let mut order: Vec<usize> = (0..preps.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Prepared<f32>> = chunk.iter().map(|&i| &preps[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_gradients(&batch, &batch_labels, &text, &params, config)?;
            params.add_scaled(&grads, -lr);
            if !params.is_finite() {
                return Err(CalipError::param(
                    "lr",
                    format!("training diverged at epoch {epoch} (parameters became non-finite)"),
                ));
            }
            epoch_loss += loss;
            batches += 1;
        }
        loss_trace.push(epoch_loss / batches as f64);
    }

    let (final_loss, train_accuracy) = mean_loss_and_accuracy(&preps, &labels, &text, &params, config)?;
    Ok(TrainOutcome {
        params,
        loss_trace,
        initial_loss,
        final_loss,
        train_accuracy,
    })
}

/// Accuracy (percent) of `params` on every image of `bundle`.
pub fn evaluate_fewshot_accuracy(
    bundle: &FeatureBundle,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<f64> {
    check_params(params, bundle.text())?;
    if bundle.is_empty() {
        return Err(CalipError::Protocol("bundle has no images".into()));
    }
    let text = engine::prepare_text::<f32>(bundle.text());
    let preps: Vec<Prepared<f32>> = bundle
        .images()
        .iter()
        .map(|img| engine::prepare(&img.spatial, &text, config.options))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = bundle.images().iter().map(|i| i.label as usize).collect();
    Ok(mean_loss_and_accuracy(&preps, &labels, &text, params, config)?.1)
}

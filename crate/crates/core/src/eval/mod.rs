//! Evaluation protocol: accuracy reports, few-shot splits, hyperparameter
//! sweeps, and the two ablation tables.
//!
//! Per-image work runs on the rayon pool; results are always collected and
//! aggregated in image order, so reports do not depend on scheduling.

mod ablation;
pub mod presets;
mod split;
mod sweep;

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{calip_forward, fuse_terms, CalipHyper, LogitTerms};
use crate::error::{CalipError, Result};
use crate::parametric::{fs_forward_with, ProjectionMask, ProjectionParams};
use crate::store::FeatureBundle;
use crate::tensor::Mat;

pub use ablation::{ablation_logits, ablation_projections, AblationRow, LogitAblationRow};
pub use split::{check_protocol_shots, sample_split, FewShotSplit, PROTOCOL_SHOTS};
pub use sweep::{parse_grid_spec, sweep, SweepGrid, SweepMode, SweepResult, SweepRow};

/// One evaluation run, serialised as a single JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    /// `100 * n_correct / n_total`.
    pub accuracy: f64,
    /// `None` for classes without images.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub n_correct: usize,
    pub n_total: usize,
    pub hyper: CalipHyper,
    pub terms: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub wall_time_ms: f64,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// The four logit terms of every image, in bundle order.
pub(crate) type LogitTable = Vec<[Mat; 4]>;

pub(crate) fn zeroshot_logits(bundle: &FeatureBundle, hyper: &CalipHyper) -> Result<LogitTable> {
    bundle
        .images()
        .par_iter()
        .map(|img| {
            let out = calip_forward(&img.spatial, bundle.text(), hyper)?;
            Ok([
                out.logits_clip,
                out.logits_textual,
                out.logits_visual,
                out.logits_cross,
            ])
        })
        .collect()
}

pub(crate) fn fewshot_logits(
    bundle: &FeatureBundle,
    params: &ProjectionParams,
    hyper: &CalipHyper,
    mask: ProjectionMask,
    options: crate::attention::ForwardOptions,
) -> Result<LogitTable> {
    bundle
        .images()
        .par_iter()
        .map(|img| {
            let out = fs_forward_with(&img.spatial, bundle.text(), params, hyper, mask, options)?;
            Ok([
                out.logits_clip,
                out.logits_textual,
                out.logits_visual,
                out.logits_cross,
            ])
        })
        .collect()
}

pub(crate) struct Tally {
    pub n_correct: usize,
    pub per_class: Vec<Option<f64>>,
}

impl Tally {
    pub fn accuracy(&self, n_total: usize) -> f64 {
        100.0 * self.n_correct as f64 / n_total as f64
    }
}

/// Scores precomputed logits under one fusion setting.
pub(crate) fn tally(
    bundle: &FeatureBundle,
    logits: &LogitTable,
    hyper: &CalipHyper,
    terms: &LogitTerms,
) -> Tally {
    let k = bundle.num_classes();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (img, parts) in bundle.images().iter().zip(logits) {
        let [a, b, c, d] = parts;
        let fused = fuse_terms([a, b, c, d], hyper, terms);
        let label = img.label as usize;
        total[label] += 1;
        if fused.argmax_row(0) == label {
            correct[label] += 1;
        }
    }
    Tally {
        n_correct: correct.iter().sum(),
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| 100.0 * c as f64 / t as f64))
            .collect(),
    }
}

fn require_images(bundle: &FeatureBundle) -> Result<()> {
    if bundle.is_empty() {
        return Err(CalipError::Protocol("bundle has no images to evaluate".into()));
    }
    Ok(())
}

/// Zero-shot accuracy with the fused logits restricted to `terms`.
pub fn evaluate_zeroshot(
    bundle: &FeatureBundle,
    hyper: &CalipHyper,
    terms: &LogitTerms,
) -> Result<EvalReport> {
    let start = Instant::now();
    hyper.validate()?;
    if !terms.any() {
        return Err(CalipError::param("mask", "must select at least one term"));
    }
    require_images(bundle)?;
    let logits = zeroshot_logits(bundle, hyper)?;
    let t = tally(bundle, &logits, hyper, terms);
    Ok(EvalReport {
        mode: "zeroshot".into(),
        accuracy: t.accuracy(bundle.len()),
        per_class_accuracy: t.per_class,
        n_correct: t.n_correct,
        n_total: bundle.len(),
        hyper: *hyper,
        terms: terms.to_string(),
        projection: None,
        seed: None,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Accuracy of trained projections on `bundle`.
pub fn evaluate_fewshot(
    bundle: &FeatureBundle,
    params: &ProjectionParams,
    hyper: &CalipHyper,
    terms: &LogitTerms,
    mask: ProjectionMask,
) -> Result<EvalReport> {
    let start = Instant::now();
    hyper.validate()?;
    if !terms.any() {
        return Err(CalipError::param("mask", "must select at least one term"));
    }
    require_images(bundle)?;
    let logits = fewshot_logits(bundle, params, hyper, mask, Default::default())?;
    let t = tally(bundle, &logits, hyper, terms);
    Ok(EvalReport {
        mode: "fewshot".into(),
        accuracy: t.accuracy(bundle.len()),
        per_class_accuracy: t.per_class,
        n_correct: t.n_correct,
        n_total: bundle.len(),
        hyper: *hyper,
        terms: terms.to_string(),
        projection: Some(mask.to_string()),
        seed: None,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::LabeledImage;
    use crate::synth;
    use crate::tensor::SpatialMap;

    /// Every pixel of an image equals its class text row.
    fn aligned_bundle() -> FeatureBundle {
        let base = synth::random_bundle(8, 5, 12, 0, 2, 2);
        let mut images = Vec::new();
        for i in 0..20u32 {
            let label = i % 5;
            let row = base.text().row(label as usize);
            let data: Vec<f32> = (0..4).flat_map(|_| row.iter().copied()).collect();
            images.push(LabeledImage {
                label,
                spatial: SpatialMap::new(2, 2, 12, data).unwrap(),
            });
        }
        FeatureBundle::new(base.class_names().to_vec(), base.text().clone(), images, 2, 2).unwrap()
    }

    #[test]
    fn perfect_alignment_gives_full_accuracy() {
        let r = evaluate_zeroshot(&aligned_bundle(), &CalipHyper::clip_only(), &LogitTerms::default()).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.n_correct, 20);
        assert!(r.per_class_accuracy.iter().all(|a| *a == Some(100.0)));
    }

    #[test]
    fn negated_text_is_below_chance() {
        let b = synth::with_negated_text(&synth::separable_bundle(3, 4, 16, 10, 2, 2, 0.5));
        let r = evaluate_zeroshot(&b, &CalipHyper::clip_only(), &LogitTerms::clip_only()).unwrap();
        assert!(r.accuracy <= 25.0, "{}", r.accuracy);
    }

    #[test]
    fn accuracy_matches_counts() {
        let b = synth::random_bundle(1, 4, 8, 30, 2, 2);
        let r = evaluate_zeroshot(&b, &CalipHyper::default(), &LogitTerms::default()).unwrap();
        assert_eq!(r.accuracy, 100.0 * r.n_correct as f64 / r.n_total as f64);
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["n_total"], 30);
        assert_eq!(v["terms"], "{1,2,3}");
    }

    #[test]
    fn image_order_does_not_change_accuracy() {
        let b = synth::random_bundle(2, 4, 8, 25, 2, 2);
        let rev: Vec<usize> = (0..25).rev().collect();
        let shuffled = b.subset(&rev).unwrap();
        let h = CalipHyper::default();
        let a = evaluate_zeroshot(&b, &h, &LogitTerms::default()).unwrap();
        let c = evaluate_zeroshot(&shuffled, &h, &LogitTerms::default()).unwrap();
        assert_eq!(a.n_correct, c.n_correct);
        assert_eq!(a.per_class_accuracy, c.per_class_accuracy);
    }

    #[test]
    fn empty_bundle_rejected() {
        let b = synth::random_bundle(2, 4, 8, 0, 2, 2);
        assert!(matches!(
            evaluate_zeroshot(&b, &CalipHyper::default(), &LogitTerms::default()),
            Err(CalipError::Protocol(_))
        ));
    }
}

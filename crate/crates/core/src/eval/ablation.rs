use serde::Serialize;

use crate::attention::{CalipHyper, LogitTerms};
use crate::error::Result;
use crate::parametric::{fs_train, ProjectionMask, TrainConfig};
use crate::store::FeatureBundle;

use super::{evaluate_fewshot, evaluate_zeroshot, tally, zeroshot_logits, FewShotSplit};

/// One row of the logit-combination table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogitAblationRow {
    pub terms: LogitTerms,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
}

/// Zero-shot accuracy for each of the six logit combinations, from a single
/// forward pass per image.
pub fn ablation_logits(bundle: &FeatureBundle, hyper: &CalipHyper) -> Result<Vec<LogitAblationRow>> {
    // Surfaces the same parameter and empty-bundle errors as a plain evaluation.
    evaluate_zeroshot(bundle, hyper, &LogitTerms::clip_only())?;
    let logits = zeroshot_logits(bundle, hyper)?;
    Ok(LogitTerms::ablation_rows()
        .into_iter()
        .map(|terms| {
            let t = tally(bundle, &logits, hyper, &terms);
            LogitAblationRow {
                terms,
                accuracy: t.accuracy(bundle.len()),
                n_correct: t.n_correct,
                n_total: bundle.len(),
            }
        })
        .collect())
}

/// One row of the projection-placement table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask: ProjectionMask,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    /// `None` for the untrained no-projection row.
    pub final_train_loss: Option<f64>,
}

/// Trains and evaluates each projection placement on `split`.
///
/// The no-projection row is zero-shot CALIP with `config.hyper`. Every
/// other row trains on the split's training images with `config` (its mask
/// replaced by the row's) and is scored on the validation images, or on the
/// training images when the split leaves no validation data.
pub fn ablation_projections(
    bundle: &FeatureBundle,
    split: &FewShotSplit,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let train = split.train_bundle(bundle)?;
    let val = split.val_bundle(bundle)?;
    let eval_set = if val.is_empty() { &train } else { &val };
    let terms = LogitTerms::default();

    let mut rows = Vec::with_capacity(ProjectionMask::ABLATION_ROWS.len());
    for mask in ProjectionMask::ABLATION_ROWS {
        if !mask.any() {
            let r = evaluate_zeroshot(eval_set, &config.hyper, &terms)?;
            rows.push(AblationRow {
                mask,
                accuracy: r.accuracy,
                n_correct: r.n_correct,
                n_total: r.n_total,
                final_train_loss: None,
            });
            continue;
        }
        let cfg = TrainConfig {
            mask,
            ..config.clone()
        };
        let outcome = fs_train(&train, &cfg)?;
        let r = evaluate_fewshot(eval_set, &outcome.params, &cfg.hyper, &terms, mask)?;
        rows.push(AblationRow {
            mask,
            accuracy: r.accuracy,
            n_correct: r.n_correct,
            n_total: r.n_total,
            final_train_loss: Some(outcome.final_loss),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::sample_split;
    use crate::synth;

    #[test]
    fn clip_row_matches_baseline() {
        let b = synth::random_bundle(11, 5, 8, 40, 2, 2);
        let h = CalipHyper::default();
        let rows = ablation_logits(&b, &h).unwrap();
        assert_eq!(rows.len(), 6);
        let base = evaluate_zeroshot(&b, &CalipHyper::clip_only(), &LogitTerms::default()).unwrap();
        assert_eq!(rows[0].accuracy, base.accuracy);
        let full = evaluate_zeroshot(&b, &h, &LogitTerms::default()).unwrap();
        assert_eq!(rows[4].accuracy, full.accuracy);
    }

    #[test]
    fn projection_table_has_five_rows_and_reduces() {
        let b = synth::separable_bundle(2, 3, 8, 6, 2, 2, 0.3);
        let split = sample_split(&b, 4, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let rows = ablation_projections(&b, &split, &cfg).unwrap();
        assert_eq!(rows.len(), 5);
        let zs = evaluate_zeroshot(&split.val_bundle(&b).unwrap(), &cfg.hyper, &LogitTerms::default()).unwrap();
        assert_eq!(rows[0].accuracy, zs.accuracy);
        assert_eq!(rows[0].final_train_loss, None);
        assert!(rows[1..].iter().all(|r| r.final_train_loss.is_some()));
    }
}

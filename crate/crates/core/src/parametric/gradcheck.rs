//! Analytic gradients against central finite differences.
//!
//! The analytic side is the production `f32` reverse pass. The numeric side
//! perturbs one parameter at a time and re-runs the forward pass in `f64`,
//! so the difference quotient is not drowned in single-precision noise.

use rand::Rng;
use serde::Serialize;

use crate::attention::CalipHyper;
use crate::error::{CalipError, Result};
use crate::tensor::{l2_normalize_rows, Mat, SpatialMap, NORM_EPS};

use super::engine;
use super::train::fs_backward;
use super::{ProjectionParams, TrainConfig, PARAM_NAMES};

pub const DEFAULT_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Images in the checked batch.
    pub batch: usize,
    pub step: f64,
    pub threshold: f64,
    /// Weights are drawn from `U(-scale, scale)`; biases from a tenth of that.
    pub param_scale: f64,
    /// Negative control: flip the sign of the largest analytic `w_q` entry.
    pub corrupt_sign: bool,
    pub config: TrainConfig,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            batch: 2,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            param_scale: 0.5,
            corrupt_sign: false,
            config: TrainConfig {
                hyper: CalipHyper::default().with_betas(1.0, 1.0, 1.0),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorError {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest finite-difference gradient magnitude in the tensor.
    pub scale: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub dims: (usize, usize, usize),
    pub tensors: Vec<TensorError>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (hw, k, c) = self.dims;
        writeln!(f, "gradcheck seed={} dims={hw}x{k}x{c}", self.seed)?;
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<7} max_rel={:.3e} max_abs={:.3e} scale={:.3e}",
                t.name, t.max_rel_error, t.max_abs_error, t.scale
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (threshold {:.0e}): {}",
            self.max_rel_error,
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error of one analytic/numeric pair.
///
/// The denominator is floored at a fraction of the tensor's own gradient
/// scale and of the largest gradient anywhere in the model, so entries that
/// are zero up to single-precision rounding do not dominate. `b_k` is the
/// extreme case: adding it shifts a whole score row by the same amount, so
/// its exact gradient is identically zero.
fn relative_error(a: f64, n: f64, tensor_scale: f64, global_scale: f64) -> f64 {
    let floor = (1e-2 * tensor_scale).max(1e-3 * global_scale).max(1e-8);
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn grad_check(seed: u64, dims: (usize, usize, usize)) -> Result<GradCheckReport> {
    grad_check_with(seed, dims, &GradCheckOptions::default())
}

pub fn grad_check_with(
    seed: u64,
    dims: (usize, usize, usize),
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (hw, k, c) = dims;
    if hw == 0 || k == 0 || c == 0 || opts.batch == 0 {
        return Err(CalipError::param("dims", "HW, K, C and batch must all be >= 1"));
    }
    let mut rng = crate::synth::rng(seed);
    let mut uniform = |n: usize, s: f64| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-s..s) as f32).collect()
    };
    let f_t = l2_normalize_rows(&Mat::from_raw(k, c, uniform(k * c, 1.0)), NORM_EPS);
    let images: Vec<SpatialMap> = (0..opts.batch)
        .map(|_| SpatialMap::new(1, hw, c, uniform(hw * c, 1.0)))
        .collect::<Result<_>>()?;
    let mut params = ProjectionParams::<f32>::zeros(c);
    for (i, t) in params.flat_mut().into_iter().enumerate() {
        let s = if i % 2 == 0 { opts.param_scale } else { 0.1 * opts.param_scale };
        t.copy_from_slice(&uniform(t.len(), s));
    }

    let cfg = &opts.config;
    let text = engine::prepare_text::<f64>(&f_t);
    let preps: Vec<_> = images
        .iter()
        .map(|s| engine::prepare::<f64>(s, &text, cfg.options))
        .collect::<Result<_>>()?;
    let shadow = params.cast::<f64>();

    // Each image is labelled with its lowest-scoring class. With the label
    // on the winning class the scaled softmax saturates and every gradient
    // collapses towards zero, where no finite difference can judge it.
    let labels = preps
        .iter()
        .map(|prep| {
            let tr = engine::forward(prep, &text, &shadow, &cfg.hyper, cfg.mask, cfg.options)?;
            let z = tr.logits_fused.data();
            Ok((0..k).min_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap_or(0))
        })
        .collect::<Result<Vec<usize>>>()?;
    let batch: Vec<(&SpatialMap, usize)> = images.iter().zip(labels.iter().copied()).collect();
    let mut analytic = fs_backward(&batch, &f_t, &params, cfg)?;
    let n = preps.len() as f64;
    if opts.corrupt_sign {
        let w = analytic.w_q.data_mut();
        let i = (0..w.len())
            .max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()))
            .unwrap_or(0);
        w[i] = -w[i];
    }

    let loss = |p: &ProjectionParams<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (prep, &label) in preps.iter().zip(&labels) {
            let tr = engine::forward(prep, &text, p, &cfg.hyper, cfg.mask, cfg.options)?;
            total += engine::cross_entropy(&tr.logits_fused, label, cfg.ce_temperature as f64).0;
        }
        Ok(total / n)
    };

    let analytic_flat = analytic.flat();
    let mut numeric_all = Vec::with_capacity(PARAM_NAMES.len());
    let mut probe = shadow.clone();
    for (ti, grad) in analytic_flat.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let orig = probe.flat()[ti][i];
            probe.flat_mut()[ti][i] = orig + opts.step;
            let plus = loss(&probe)?;
            probe.flat_mut()[ti][i] = orig - opts.step;
            let minus = loss(&probe)?;
            probe.flat_mut()[ti][i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        numeric_all.push(numeric);
    }
    let abs_max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let global_scale = numeric_all.iter().fold(0.0f64, |m, v| m.max(abs_max(v)));

    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for ((name, grad), numeric) in PARAM_NAMES.iter().zip(&analytic_flat).zip(&numeric_all) {
        let scale = abs_max(numeric);
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (&a, n) in grad.iter().zip(numeric) {
            let a = a as f64;
            max_abs = max_abs.max((a - n).abs());
            max_rel = max_rel.max(relative_error(a, *n, scale, global_scale));
        }
        tensors.push(TensorError {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            scale,
        });
    }
    let max_rel_error = tensors.iter().fold(0.0f64, |m, t| m.max(t.max_rel_error));
    Ok(GradCheckReport {
        seed,
        dims,
        tensors,
        max_rel_error,
        threshold: opts.threshold,
        pass: max_rel_error < opts.threshold,
    })
}

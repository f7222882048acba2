//! Zero-shot forward pass: parameter-free bidirectional cross-modal
//! attention and three-term logit fusion.
//!
//! Given a per-image spatial map `F_s` (`HW x C`) and class text features
//! `F_t` (`K x C`):
//!
//! ```text
//! A     = F_s F_tᵀ                          (HW x K)
//! F_s^a = softmax(A  / alpha_t) F_t         (HW x C)
//! F_t^a = softmax(Aᵀ / alpha_s) F_s         (K x C)
//! F_v   = pool_mean(F_s),  F_v^a = pool_max_avg(F_s^a)
//! logits = b1 F_v F_tᵀ + b2 F_v F_t^aᵀ + b3 F_v^a F_tᵀ
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{CalipError, Result};
use crate::tensor::{
    l2_normalize_rows, matmul, matmul_transposed, mean_pool, pool_max_avg, softmax_rows, Mat,
    SpatialMap, NORM_EPS,
};

/// Attention temperatures and logit fusion weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalipHyper {
    /// Softmax temperature for the visual update `softmax(A / alpha_t) F_t`.
    pub alpha_t: f32,
    /// Softmax temperature for the textual update `softmax(Aᵀ / alpha_s) F_s`.
    pub alpha_s: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub beta3: f32,
}

impl Default for CalipHyper {
    fn default() -> Self {
        CalipHyper {
            alpha_t: 2.0,
            alpha_s: 2.0,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 0.1,
        }
    }
}

impl CalipHyper {
    pub fn new(alpha_t: f32, alpha_s: f32, beta1: f32, beta2: f32, beta3: f32) -> Result<Self> {
        let h = CalipHyper {
            alpha_t,
            alpha_s,
            beta1,
            beta2,
            beta3,
        };
        h.validate()?;
        Ok(h)
    }

    /// Plain cosine matching: `beta = (1, 0, 0)`.
    pub fn clip_only() -> Self {
        CalipHyper {
            beta1: 1.0,
            beta2: 0.0,
            beta3: 0.0,
            ..CalipHyper::default()
        }
    }

    pub fn with_betas(mut self, beta1: f32, beta2: f32, beta3: f32) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.beta3 = beta3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_t", self.alpha_t), ("alpha_s", self.alpha_s)] {
            if v <= 0.0 || !v.is_finite() {
                return Err(CalipError::param(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(CalipError::param(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.beta1 + self.beta2 + self.beta3 <= 0.0 {
            return Err(CalipError::param(
                "beta1+beta2+beta3",
                "must be > 0 (at least one logit term needs weight)",
            ));
        }
        Ok(())
    }
}

/// Which of the four available logit terms enter the fused prediction.
///
/// Terms 1-3 are weighted by `beta1..beta3`. Term 4 (`F_v^a F_t^aᵀ`, both
/// modalities updated) is only used in ablations and carries its own weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitTerms {
    pub clip: bool,
    pub textual: bool,
    pub visual: bool,
    pub cross: bool,
    pub cross_weight: f32,
}

impl Default for LogitTerms {
    fn default() -> Self {
        LogitTerms {
            clip: true,
            textual: true,
            visual: true,
            cross: false,
            cross_weight: 1.0,
        }
    }
}

impl LogitTerms {
    pub fn clip_only() -> Self {
        LogitTerms {
            clip: true,
            textual: false,
            visual: false,
            cross: false,
            cross_weight: 1.0,
        }
    }

    /// The six rows of the logit-combination ablation, in table order:
    /// `{1}`, `{1,2}`, `{1,3}`, `{1,4}`, `{1,2,3}`, `{1,2,3,4}`.
    pub fn ablation_rows() -> Vec<LogitTerms> {
        ["1", "12", "13", "14", "123", "1234"]
            .iter()
            .map(|s| s.parse().expect("static mask"))
            .collect()
    }

    pub fn any(&self) -> bool {
        self.clip || self.textual || self.visual || self.cross
    }

    fn weights(&self, hyper: &CalipHyper) -> [f64; 4] {
        let pick = |on: bool, w: f32| if on { w as f64 } else { 0.0 };
        [
            pick(self.clip, hyper.beta1),
            pick(self.textual, hyper.beta2),
            pick(self.visual, hyper.beta3),
            pick(self.cross, self.cross_weight),
        ]
    }
}

impl std::fmt::Display for LogitTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        for (on, t) in [
            (self.clip, "1"),
            (self.textual, "2"),
            (self.visual, "3"),
            (self.cross, "4"),
        ] {
            if on {
                parts.push(t);
            }
        }
        write!(f, "{{{}}}", parts.join(","))
    }
}

impl std::str::FromStr for LogitTerms {
    type Err = CalipError;

    /// Accepts digit lists such as `123`, `1,2,3` or `{1,4}`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = LogitTerms {
            clip: false,
            textual: false,
            visual: false,
            cross: false,
            cross_weight: 1.0,
        };
        for (pos, ch) in s.char_indices() {
            match ch {
                '1' => t.clip = true,
                '2' => t.textual = true,
                '3' => t.visual = true,
                '4' => t.cross = true,
                ',' | ' ' | '{' | '}' => {}
                other => {
                    return Err(CalipError::param(
                        "mask",
                        format!("unexpected '{other}' at position {pos} (terms are 1-4)"),
                    ))
                }
            }
        }
        if !t.any() {
            return Err(CalipError::param("mask", "must select at least one term"));
        }
        Ok(t)
    }
}

/// Switches for the two normalisation choices the equations leave open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// L2-normalise every pixel of `F_s` before building the attention map.
    pub normalize_pixels: bool,
    /// Re-normalise `F_t^a` rows and `F_v^a` before the logit products.
    pub renormalize_updates: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            normalize_pixels: true,
            renormalize_updates: true,
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CalipOutputs {
    /// `A` (`HW x K`). In the parametric variant this is `A_s`, already softmaxed.
    pub attention: Mat,
    /// Pixel features used by the attention, after optional normalisation.
    pub f_s: Mat,
    /// Text features after row normalisation.
    pub f_t: Mat,
    pub f_v: Mat,
    pub f_s_a: Mat,
    pub f_t_a: Mat,
    pub f_v_a: Mat,
    pub logits_clip: Mat,
    pub logits_textual: Mat,
    pub logits_visual: Mat,
    pub logits_cross: Mat,
    pub logits_fused: Mat,
}

impl CalipOutputs {
    pub fn num_classes(&self) -> usize {
        self.logits_fused.cols()
    }

    /// Fused logits restricted to `terms`, weighted by `hyper`.
    pub fn fuse(&self, hyper: &CalipHyper, terms: &LogitTerms) -> Mat {
        fuse_terms(self.logit_parts(), hyper, terms)
    }

    /// The four logit terms in order: clip, textual, visual, cross.
    pub fn logit_parts(&self) -> [&Mat; 4] {
        [
            &self.logits_clip,
            &self.logits_textual,
            &self.logits_visual,
            &self.logits_cross,
        ]
    }
}

/// Weighted sum of the selected logit terms, accumulated in `f64`.
pub fn fuse_terms(parts: [&Mat; 4], hyper: &CalipHyper, terms: &LogitTerms) -> Mat {
    fuse_logits(parts, terms.weights(hyper))
}

fn fuse_logits(parts: [&Mat; 4], weights: [f64; 4]) -> Mat {
    let k = parts[0].cols();
    let data = (0..k)
        .map(|j| {
            let mut acc = 0.0f64;
            for (p, w) in parts.iter().zip(weights) {
                if w != 0.0 {
                    acc += w * p.get(0, j) as f64;
                }
            }
            acc as f32
        })
        .collect();
    Mat::from_raw(1, k, data)
}

/// `A = F_s F_tᵀ`. Both inputs are expected row-normalised, in which case
/// `A[p][k]` is the cosine similarity of pixel `p` and class `k`.
pub fn attention_map(f_s: &Mat, f_t: &Mat) -> Result<Mat> {
    if f_s.cols() != f_t.cols() {
        return Err(CalipError::dim(
            "attention_map",
            format!("pixels {}x{}", f_s.rows(), f_s.cols()),
            format!("text {}x{}", f_t.rows(), f_t.cols()),
        ));
    }
    matmul_transposed(f_s, f_t)
}

/// `F_s^a = softmax(A / alpha_t) F_t`: each pixel becomes a convex
/// combination of class text features.
pub fn update_visual(attention: &Mat, f_t: &Mat, alpha_t: f32) -> Result<Mat> {
    if attention.cols() != f_t.rows() {
        return Err(CalipError::dim(
            "update_visual",
            format!("attention {}x{}", attention.rows(), attention.cols()),
            format!("text {}x{}", f_t.rows(), f_t.cols()),
        ));
    }
    let weights = softmax_rows(attention, alpha_t as f64)
        .map_err(|_| CalipError::param("alpha_t", format!("must be > 0, got {alpha_t}")))?;
    matmul(&weights, f_t)
}

/// `F_t^a = softmax(Aᵀ / alpha_s) F_s`: each class becomes a convex
/// combination of pixel features.
pub fn update_textual(attention: &Mat, f_s: &Mat, alpha_s: f32) -> Result<Mat> {
    if attention.rows() != f_s.rows() {
        return Err(CalipError::dim(
            "update_textual",
            format!("attention {}x{}", attention.rows(), attention.cols()),
            format!("pixels {}x{}", f_s.rows(), f_s.cols()),
        ));
    }
    let weights = softmax_rows(&attention.transpose(), alpha_s as f64)
        .map_err(|_| CalipError::param("alpha_s", format!("must be > 0, got {alpha_s}")))?;
    matmul(&weights, f_s)
}

/// Full zero-shot pass with the default [`ForwardOptions`].
pub fn calip_forward(f_s_raw: &SpatialMap, f_t: &Mat, hyper: &CalipHyper) -> Result<CalipOutputs> {
    calip_forward_with(f_s_raw, f_t, hyper, ForwardOptions::default())
}

pub fn calip_forward_with(
    f_s_raw: &SpatialMap,
    f_t: &Mat,
    hyper: &CalipHyper,
    opts: ForwardOptions,
) -> Result<CalipOutputs> {
    hyper.validate()?;
    if f_s_raw.c() != f_t.cols() {
        return Err(CalipError::dim(
            "calip_forward",
            format!("spatial {}x{}x{}", f_s_raw.h(), f_s_raw.w(), f_s_raw.c()),
            format!("text {}x{}", f_t.rows(), f_t.cols()),
        ));
    }
    let f_t = l2_normalize_rows(f_t, NORM_EPS);
    let f_s = if opts.normalize_pixels {
        l2_normalize_rows(&f_s_raw.to_pixels(), NORM_EPS)
    } else {
        f_s_raw.to_pixels()
    };
    let f_v = l2_normalize_rows(&mean_pool(&f_s)?, NORM_EPS);

    let attention = attention_map(&f_s, &f_t)?;
    let f_s_a = update_visual(&attention, &f_t, hyper.alpha_t)?;
    let f_t_a = update_textual(&attention, &f_s, hyper.alpha_s)?;
    let mut f_v_a = pool_max_avg(&f_s_a)?;
    let f_t_a = if opts.renormalize_updates {
        f_v_a = l2_normalize_rows(&f_v_a, NORM_EPS);
        l2_normalize_rows(&f_t_a, NORM_EPS)
    } else {
        f_t_a
    };

    assemble(attention, f_s, f_t, f_v, f_s_a, f_t_a, f_v_a, hyper)
}

/// Computes the four logit terms and the default three-term fusion.
#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble(
    attention: Mat,
    f_s: Mat,
    f_t: Mat,
    f_v: Mat,
    f_s_a: Mat,
    f_t_a: Mat,
    f_v_a: Mat,
    hyper: &CalipHyper,
) -> Result<CalipOutputs> {
    let logits_clip = matmul_transposed(&f_v, &f_t)?;
    let logits_textual = matmul_transposed(&f_v, &f_t_a)?;
    let logits_visual = matmul_transposed(&f_v_a, &f_t)?;
    let logits_cross = matmul_transposed(&f_v_a, &f_t_a)?;
    let logits_fused = fuse_logits(
        [&logits_clip, &logits_textual, &logits_visual, &logits_cross],
        LogitTerms::default().weights(hyper),
    );
    Ok(CalipOutputs {
        attention,
        f_s,
        f_t,
        f_v,
        f_s_a,
        f_t_a,
        f_v_a,
        logits_clip,
        logits_textual,
        logits_visual,
        logits_cross,
        logits_fused,
    })
}

/// Index of the largest fused logit, lowest index on ties.
pub fn predict(outputs: &CalipOutputs) -> usize {
    outputs.logits_fused.argmax_row(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn m(rows: &[&[f32]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    #[test]
    fn attention_orthonormal() {
        let a = attention_map(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(a.data(), &[1.0, 0.0]);
    }

    #[test]
    fn attention_gram_has_unit_diagonal() {
        let x = synth::random_unit_rows(3, 5, 4);
        let a = attention_map(&x, &x).unwrap();
        for i in 0..3 {
            assert!((a.get(i, i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_pairwise_dot() {
        let s = synth::random_unit_rows(3, 4, 1);
        let t = synth::random_unit_rows(2, 4, 2);
        let a = attention_map(&s, &t).unwrap();
        for p in 0..3 {
            for k in 0..2 {
                let want: f64 = (0..4).map(|c| s.get(p, c) as f64 * t.get(k, c) as f64).sum();
                assert!((a.get(p, k) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_channel_mismatch() {
        let err = attention_map(&Mat::zeros(2, 3), &Mat::zeros(2, 4)).unwrap_err();
        assert!(matches!(err, CalipError::Dimension { .. }));
    }

    #[test]
    fn update_visual_symmetric_weights() {
        let out = update_visual(&m(&[&[0.3, 0.3]]), &Mat::identity(2), 2.0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn update_visual_single_class() {
        let t = m(&[&[0.6, 0.8]]);
        let out = update_visual(&m(&[&[0.1], &[-0.4], &[0.9]]), &t, 2.0).unwrap();
        for p in 0..3 {
            assert_eq!(out.row(p), t.row(0));
        }
    }

    #[test]
    fn update_visual_softmax_then_matmul() {
        let a = m(&[&[0.2, -0.5], &[0.9, 0.1]]);
        let t = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let out = update_visual(&a, &t, 2.0).unwrap();
        for p in 0..2 {
            let e: Vec<f64> = (0..2).map(|k| (a.get(p, k) as f64 / 2.0).exp()).collect();
            let z = e[0] + e[1];
            for c in 0..2 {
                let want = (e[0] * t.get(0, c) as f64 + e[1] * t.get(1, c) as f64) / z;
                assert!((out.get(p, c) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn update_visual_rejects_bad_alpha() {
        let err = update_visual(&m(&[&[0.1]]), &m(&[&[1.0]]), 0.0).unwrap_err();
        assert!(err.to_string().contains("alpha_t"));
    }

    #[test]
    fn update_textual_single_pixel() {
        let s = m(&[&[0.6, 0.8]]);
        let out = update_textual(&m(&[&[0.1, 0.7, -0.2]]), &s, 2.0).unwrap();
        for k in 0..3 {
            assert_eq!(out.row(k), s.row(0));
        }
    }

    #[test]
    fn update_textual_uniform_attention_gives_mean() {
        let s = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let out = update_textual(&m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]), &s, 2.0).unwrap();
        for k in 0..2 {
            assert!((out.get(k, 0) - 2.0 / 3.0).abs() < 1e-6);
            assert!((out.get(k, 1) - 2.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn update_textual_transpose_softmax_matmul() {
        let a = m(&[&[0.2, -0.5], &[0.9, 0.1]]);
        let s = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let out = update_textual(&a, &s, 2.0).unwrap();
        for k in 0..2 {
            let e: Vec<f64> = (0..2).map(|p| (a.get(p, k) as f64 / 2.0).exp()).collect();
            let z = e[0] + e[1];
            for c in 0..2 {
                let want = (e[0] * s.get(0, c) as f64 + e[1] * s.get(1, c) as f64) / z;
                assert!((out.get(k, c) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clip_only_betas_reduce_to_cosine_logits() {
        let (spatial, text) = synth::fixed_instance(3, 2, 2, 3, 6);
        let out = calip_forward(&spatial, &text, &CalipHyper::clip_only()).unwrap();
        assert_eq!(out.logits_fused, out.logits_clip);
    }

    #[test]
    fn single_class_predicts_zero() {
        let (spatial, text) = synth::fixed_instance(5, 2, 2, 1, 4);
        let out = calip_forward(&spatial, &text, &CalipHyper::default()).unwrap();
        assert_eq!(out.num_classes(), 1);
        assert_eq!(predict(&out), 0);
    }

    #[test]
    fn predict_tie_goes_low() {
        let (spatial, text) = synth::fixed_instance(0, 2, 2, 2, 4);
        let mut out = calip_forward(&spatial, &text, &CalipHyper::default()).unwrap();
        out.logits_fused = m(&[&[0.1, 0.9]]);
        assert_eq!(predict(&out), 1);
        out.logits_fused = m(&[&[0.5, 0.5]]);
        assert_eq!(predict(&out), 0);
    }

    #[test]
    fn hyper_validation() {
        assert!(CalipHyper::new(0.0, 2.0, 1.0, 0.0, 0.0).is_err());
        assert!(CalipHyper::new(2.0, -1.0, 1.0, 0.0, 0.0).is_err());
        assert!(CalipHyper::new(2.0, 2.0, 1.0, -1.0, 0.0).is_err());
        assert!(CalipHyper::new(2.0, 2.0, 0.0, 0.0, 0.0).is_err());
        assert!(CalipHyper::new(2.0, 2.0, 0.0, 0.0, 0.5).is_ok());
    }

    #[test]
    fn mask_parsing() {
        let t: LogitTerms = "1,2,3".parse().unwrap();
        assert_eq!(t, LogitTerms::default());
        assert_eq!("{1}".parse::<LogitTerms>().unwrap(), LogitTerms::clip_only());
        assert!("".parse::<LogitTerms>().is_err());
        assert!("15".parse::<LogitTerms>().is_err());
        assert_eq!(LogitTerms::ablation_rows().len(), 6);
        assert_eq!(LogitTerms::default().to_string(), "{1,2,3}");
    }

    #[test]
    fn default_mask_fuse_matches_forward() {
        let (spatial, text) = synth::fixed_instance(8, 3, 3, 4, 8);
        let hyper = CalipHyper::default().with_betas(1.0, 0.7, 0.3);
        let out = calip_forward(&spatial, &text, &hyper).unwrap();
        assert_eq!(out.fuse(&hyper, &LogitTerms::default()), out.logits_fused);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let (spatial, text) = synth::fixed_instance(12, 3, 2, 5, 8);
        let hyper = CalipHyper::default();
        let a = calip_forward(&spatial, &text, &hyper).unwrap();
        let b = calip_forward(&spatial, &text, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_scale_invariance() {
        let (spatial, text) = synth::fixed_instance(4, 2, 3, 3, 6);
        let mut data = spatial.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let pixel = i / 6;
            *v *= 1.0 + pixel as f32 * 3.0;
        }
        let scaled = SpatialMap::new(2, 3, 6, data).unwrap();
        let hyper = CalipHyper::default();
        let a = calip_forward(&spatial, &text, &hyper).unwrap();
        let b = calip_forward(&scaled, &text, &hyper).unwrap();
        assert!(a.logits_fused.max_abs_diff(&b.logits_fused).unwrap() < 1e-6);
    }

    #[test]
    fn convexity_of_updates() {
        let (spatial, text) = synth::fixed_instance(21, 3, 3, 4, 8);
        let out = calip_forward(&spatial, &text, &CalipHyper::default()).unwrap();
        let max_text = out.f_t.row_norms().into_iter().fold(0.0, f64::max);
        for n in out.f_s_a.row_norms() {
            assert!(n <= max_text + 1e-6);
        }
    }
}

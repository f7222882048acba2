//! Few-shot variant: shared query/key/value pre-projections and a single
//! post-projection around bidirectional attention, trained with SGD on
//! frozen features.
//!
//! ```text
//! Q_t, K_t, V_t = PreProject(F_t)        Q_s, K_s, V_s = PreProject(F_s)
//! A_t = softmax(Q_t K_sᵀ / √C)           A_s = softmax(Q_s K_tᵀ / √C)
//! F_t^a = PostProject(A_t V_s)           F_s^a = PostProject(A_s V_t)
//! ```
//!
//! followed by the same pooling and three-term logit fusion as the
//! zero-shot path.

mod engine;
pub mod gradcheck;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{assemble, CalipHyper, CalipOutputs, ForwardOptions};
use crate::error::{CalipError, Result};
use crate::tensor::{Mat, Real, SpatialMap};

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use train::{
    evaluate_fewshot_accuracy, fs_backward, fs_loss, fs_train, LrSchedule, TrainConfig,
    TrainOutcome,
};

/// Learnable projection weights. Also used to hold their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T: Real = f32> {
    pub w_q: Mat<T>,
    pub b_q: Vec<T>,
    pub w_k: Mat<T>,
    pub b_k: Vec<T>,
    pub w_v: Mat<T>,
    pub b_v: Vec<T>,
    pub w_post: Mat<T>,
    pub b_post: Vec<T>,
}

/// Names of the eight parameter tensors in storage order.
pub const PARAM_NAMES: [&str; 8] = [
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_post", "b_post",
];

impl<T: Real> ProjectionParams<T> {
    pub fn zeros(c: usize) -> Self {
        ProjectionParams {
            w_q: Mat::zeros(c, c),
            b_q: vec![T::zero(); c],
            w_k: Mat::zeros(c, c),
            b_k: vec![T::zero(); c],
            w_v: Mat::zeros(c, c),
            b_v: vec![T::zero(); c],
            w_post: Mat::zeros(c, c),
            b_post: vec![T::zero(); c],
        }
    }

    /// Identity weights and zero biases: every projection is a no-op.
    pub fn identity(c: usize) -> Self {
        ProjectionParams {
            w_q: Mat::identity(c),
            w_k: Mat::identity(c),
            w_v: Mat::identity(c),
            w_post: Mat::identity(c),
            ..ProjectionParams::zeros(c)
        }
    }

    /// Weights uniform in `[-scale, scale)`, biases zero, drawn in the order
    /// `w_q, w_k, w_v, w_post`.
    pub fn init_scaled<R: Rng>(c: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || {
            let data = (0..c * c)
                .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
                .collect();
            Mat::from_raw(c, c, data)
        };
        let (w_q, w_k, w_v, w_post) = (draw(), draw(), draw(), draw());
        ProjectionParams {
            w_q,
            w_k,
            w_v,
            w_post,
            ..ProjectionParams::zeros(c)
        }
    }

    /// The default initialisation: `U(-1/√C, 1/√C)` weights, zero biases.
    pub fn init_uniform(c: usize, seed: u64) -> Self {
        let mut rng = crate::synth::rng(seed);
        Self::init_scaled(c, 1.0 / (c as f64).sqrt(), &mut rng)
    }

    pub fn from_parts(
        q: (Mat<T>, Vec<T>),
        k: (Mat<T>, Vec<T>),
        v: (Mat<T>, Vec<T>),
        post: (Mat<T>, Vec<T>),
    ) -> Result<Self> {
        let p = ProjectionParams {
            w_q: q.0,
            b_q: q.1,
            w_k: k.0,
            b_k: k.1,
            w_v: v.0,
            b_v: v.1,
            w_post: post.0,
            b_post: post.1,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        let c = self.channels();
        for (i, (w, b)) in self.tensors().into_iter().enumerate() {
            if w.shape() != (c, c) || b.len() != c {
                return Err(CalipError::dim(
                    "ProjectionParams",
                    format!("C = {c}"),
                    format!(
                        "{} is {}x{} with bias of {}",
                        PARAM_NAMES[2 * i],
                        w.rows(),
                        w.cols(),
                        b.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// `(weight, bias)` pairs in storage order.
    pub fn tensors(&self) -> [(&Mat<T>, &[T]); 4] {
        [
            (&self.w_q, &self.b_q),
            (&self.w_k, &self.b_k),
            (&self.w_v, &self.b_v),
            (&self.w_post, &self.b_post),
        ]
    }

    /// All eight tensors as flat slices, in [`PARAM_NAMES`] order.
    pub fn flat(&self) -> [&[T]; 8] {
        [
            self.w_q.data(),
            &self.b_q,
            self.w_k.data(),
            &self.b_k,
            self.w_v.data(),
            &self.b_v,
            self.w_post.data(),
            &self.b_post,
        ]
    }

    pub fn flat_mut(&mut self) -> [&mut [T]; 8] {
        [
            self.w_q.data_mut(),
            &mut self.b_q,
            self.w_k.data_mut(),
            &mut self.b_k,
            self.w_v.data_mut(),
            &mut self.b_v,
            self.w_post.data_mut(),
            &mut self.b_post,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ProjectionParams<U> {
        let v = |b: &[T]| b.iter().map(|x| U::from_f64(x.as_f64())).collect();
        ProjectionParams {
            w_q: self.w_q.cast(),
            b_q: v(&self.b_q),
            w_k: self.w_k.cast(),
            b_k: v(&self.b_k),
            w_v: self.w_v.cast(),
            b_v: v(&self.b_v),
            w_post: self.w_post.cast(),
            b_post: v(&self.b_post),
        }
    }

    /// `self += k * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, k: f64) {
        for (dst, src) in self.flat_mut().into_iter().zip(other.flat()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(d.as_f64() + k * s.as_f64());
            }
        }
    }
}

/// Which projections are active, per modality. Pre-projection off means
/// `Q = K = V = features`; post-projection off means the attended features
/// are used as they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionMask {
    pub pre_visual: bool,
    pub post_visual: bool,
    pub pre_textual: bool,
    pub post_textual: bool,
}

impl Default for ProjectionMask {
    fn default() -> Self {
        ProjectionMask::ALL
    }
}

impl ProjectionMask {
    pub const NONE: ProjectionMask = ProjectionMask::new(false, false, false, false);
    pub const ALL: ProjectionMask = ProjectionMask::new(true, true, true, true);

    pub const fn new(pre_visual: bool, post_visual: bool, pre_textual: bool, post_textual: bool) -> Self {
        ProjectionMask {
            pre_visual,
            post_visual,
            pre_textual,
            post_textual,
        }
    }

    /// The five projection placements compared in the ablation, in table
    /// order (visual pre, visual post, textual pre, textual post).
    pub const ABLATION_ROWS: [ProjectionMask; 5] = [
        ProjectionMask::NONE,
        ProjectionMask::new(true, false, true, false),
        ProjectionMask::new(true, false, true, true),
        ProjectionMask::new(true, true, true, false),
        ProjectionMask::ALL,
    ];

    pub fn any(&self) -> bool {
        self.pre_visual || self.post_visual || self.pre_textual || self.post_textual
    }
}

impl std::fmt::Display for ProjectionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tick = |b: bool| if b { "x" } else { "-" };
        write!(
            f,
            "visual[pre {} post {}] textual[pre {} post {}]",
            tick(self.pre_visual),
            tick(self.post_visual),
            tick(self.pre_textual),
            tick(self.post_textual)
        )
    }
}

pub(crate) fn check_params(params: &ProjectionParams, f_t: &Mat) -> Result<()> {
    params.check_shapes()?;
    if params.channels() != f_t.cols() {
        return Err(CalipError::dim(
            "projection params",
            format!("weights for C = {}", params.channels()),
            format!("features with C = {}", f_t.cols()),
        ));
    }
    if !params.is_finite() {
        return Err(CalipError::Integrity {
            offset: 0,
            reason: "projection parameters contain a non-finite value".into(),
        });
    }
    Ok(())
}

/// Forward pass with all projections active and default normalisation.
pub fn fs_forward(
    f_s_raw: &SpatialMap,
    f_t: &Mat,
    params: &ProjectionParams,
    hyper: &CalipHyper,
) -> Result<CalipOutputs> {
    fs_forward_with(
        f_s_raw,
        f_t,
        params,
        hyper,
        ProjectionMask::ALL,
        ForwardOptions::default(),
    )
}

/// Forward pass. `attention` in the result is `A_s` (`HW x K`).
pub fn fs_forward_with(
    f_s_raw: &SpatialMap,
    f_t: &Mat,
    params: &ProjectionParams,
    hyper: &CalipHyper,
    mask: ProjectionMask,
    opts: ForwardOptions,
) -> Result<CalipOutputs> {
    hyper.validate()?;
    check_params(params, f_t)?;
    if f_s_raw.c() != f_t.cols() {
        return Err(CalipError::dim(
            "fs_forward",
            format!("spatial {}x{}x{}", f_s_raw.h(), f_s_raw.w(), f_s_raw.c()),
            format!("text {}x{}", f_t.rows(), f_t.cols()),
        ));
    }
    let text = engine::prepare_text::<f32>(f_t);
    let prep = engine::prepare(f_s_raw, &text, opts)?;
    let tr = engine::forward(&prep, &text, params, hyper, mask, opts)?;
    assemble(tr.a_s, prep.s, text, prep.f_v, tr.f_s_a, tr.f_t_a, tr.f_v_a, hyper)
}

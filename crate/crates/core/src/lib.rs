//! CALIP: cross-modal attention over frozen vision-language features.
//!
//! The crate works on features that were already extracted by an image and
//! a text encoder: a spatial map per image (`H x W x C`) and one embedding
//! per class (`K x C`). On top of that it provides
//!
//! * [`attention`]: the parameter-free bidirectional attention and logit
//!   fusion used for zero-shot classification,
//! * [`parametric`]: the learnable variant with linear projections, its
//!   hand-written backward pass, a gradient checker and an SGD trainer,
//! * [`store`]: the `CALF` feature-bundle and `CALW` weights file formats,
//! * [`eval`]: accuracy reports, few-shot splits, grid sweeps and ablations,
//! * [`cli`]: the `calip` command-line tool.
//!
//! ```
//! use calip::{calip_forward, predict, synth, CalipHyper};
//!
//! let (spatial, text) = synth::fixed_instance(0, 2, 2, 3, 8);
//! let out = calip_forward(&spatial, &text, &CalipHyper::default())?;
//! assert_eq!(out.logits_fused.shape(), (1, 3));
//! assert!(predict(&out) < 3);
//! # Ok::<(), calip::CalipError>(())
//! ```

pub mod attention;
pub mod cli;
pub mod error;
pub mod eval;
pub mod parametric;
pub mod store;
pub mod synth;
pub mod tensor;

pub use attention::{
    calip_forward, calip_forward_with, predict, CalipHyper, CalipOutputs, ForwardOptions, LogitTerms,
};
pub use error::{CalipError, Result};
pub use eval::{evaluate_fewshot, evaluate_zeroshot, sample_split, sweep, EvalReport, FewShotSplit, SweepGrid, SweepMode};
pub use parametric::{fs_forward, fs_train, grad_check, ProjectionMask, ProjectionParams, TrainConfig};
pub use store::{load_bundle, save_bundle, FeatureBundle, LabeledImage};
pub use tensor::{Mat, SpatialMap};

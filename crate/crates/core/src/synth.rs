//! Seeded synthetic feature generators.
//!
//! Everything here is driven by `ChaCha8Rng`, so a given seed yields the
//! same bytes on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::store::{FeatureBundle, LabeledImage};
use crate::tensor::{l2_normalize_rows, Mat, SpatialMap, NORM_EPS};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// `rows x cols` matrix of unit-norm rows drawn uniformly from `[-1, 1)`
/// then normalised.
pub fn random_unit_rows(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    let m = Mat::from_raw(rows, cols, uniform(&mut r, rows * cols));
    l2_normalize_rows(&m, NORM_EPS)
}

/// A raw `h x w x c` spatial map and `k x c` unit text features.
///
/// This is the fixed instance the end-to-end oracle tests use with
/// `(seed 0, h 2, w 2, k 3, c 8)`.
pub fn fixed_instance(seed: u64, h: usize, w: usize, k: usize, c: usize) -> (SpatialMap, Mat) {
    let mut r = rng(seed);
    let spatial = SpatialMap::new(h, w, c, uniform(&mut r, h * w * c)).expect("sized");
    let text = Mat::from_raw(k, c, uniform(&mut r, k * c));
    (spatial, l2_normalize_rows(&text, NORM_EPS))
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Unstructured bundle: random unit text rows, uniform raw pixels, uniform labels.
pub fn random_bundle(seed: u64, k: usize, c: usize, n: usize, h: usize, w: usize) -> FeatureBundle {
    let mut r = rng(seed);
    let text = l2_normalize_rows(&Mat::from_raw(k, c, uniform(&mut r, k * c)), NORM_EPS);
    let images = (0..n)
        .map(|_| LabeledImage {
            label: r.gen_range(0..k as u32),
            spatial: SpatialMap::new(h, w, c, uniform(&mut r, h * w * c)).expect("sized"),
        })
        .collect();
    FeatureBundle::new(class_names(k), text, images, h, w).expect("synthetic bundle is valid")
}

/// Like [`random_bundle`], but every pixel also carries `signal` times its
/// class's text feature on top of the uniform noise. Small values give
/// accuracies between chance and perfect.
pub fn noisy_bundle(seed: u64, k: usize, c: usize, n: usize, h: usize, w: usize, signal: f32) -> FeatureBundle {
    let mut r = rng(seed);
    let text = l2_normalize_rows(&Mat::from_raw(k, c, uniform(&mut r, k * c)), NORM_EPS);
    let images = (0..n)
        .map(|_| {
            let label = r.gen_range(0..k as u32);
            let class = text.row(label as usize);
            let data = uniform(&mut r, h * w * c)
                .into_iter()
                .enumerate()
                .map(|(i, v)| v + signal * class[i % c])
                .collect();
            LabeledImage {
                label,
                spatial: SpatialMap::new(h, w, c, data).expect("sized"),
            }
        })
        .collect();
    FeatureBundle::new(class_names(k), text, images, h, w).expect("synthetic bundle is valid")
}

/// Linearly separable bundle with `shots` images per class.
///
/// Class text features are the first `k` standard basis vectors. Every pixel
/// of a class-`j` image is `e_j` plus small leakage into the other class
/// directions and a larger component orthogonal to all classes. The mean
/// pixel's cosine to its own class exceeds every other class by at least
/// `margin`; samples violating that are redrawn.
pub fn separable_bundle(
    seed: u64,
    k: usize,
    c: usize,
    shots: usize,
    h: usize,
    w: usize,
    margin: f64,
) -> FeatureBundle {
    assert!(c > k, "need spare channels for the orthogonal noise");
    let mut r = rng(seed);
    let mut text = Mat::zeros(k, c);
    for j in 0..k {
        text.row_mut(j)[j] = 1.0;
    }
    let mut images = Vec::with_capacity(k * shots);
    for label in 0..k {
        for _ in 0..shots {
            loop {
                let mut data = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    let mut px = vec![0.0f32; c];
                    for (ch, v) in px.iter_mut().enumerate() {
                        *v = if ch == label {
                            1.0
                        } else if ch < k {
                            0.1 * r.gen_range(-1.0f32..1.0)
                        } else {
                            0.35 * r.gen_range(-1.0f32..1.0)
                        };
                    }
                    data.extend(px);
                }
                let spatial = SpatialMap::new(h, w, c, data).expect("sized");
                if cosine_margin(&spatial, &text, label) >= margin {
                    images.push(LabeledImage {
                        label: label as u32,
                        spatial,
                    });
                    break;
                }
            }
        }
    }
    FeatureBundle::new(class_names(k), text, images, h, w).expect("synthetic bundle is valid")
}

/// Bundle whose images are linearly separable along directions the text
/// features barely see.
///
/// Class `j` pixels sit around the prototype `e_{k+j}` with small leakage
/// into the other prototypes and noise in the channels from `2k` on. The
/// mean pixel's cosine to its own prototype beats every other prototype by
/// at least `margin`; samples violating that are redrawn. Class text
/// features are `e_j + text_alignment * e_{k+j}`, normalised, so
/// `text_alignment = 0` makes every cosine logit exactly zero and small
/// values give a weak, unsaturated zero-shot signal.
#[allow(clippy::too_many_arguments)]
pub fn latent_separable_bundle(
    seed: u64,
    k: usize,
    c: usize,
    shots: usize,
    h: usize,
    w: usize,
    margin: f64,
    text_alignment: f32,
) -> FeatureBundle {
    assert!(c > 2 * k, "need k text channels, k prototype channels and noise channels");
    let mut r = rng(seed);
    let mut text = Mat::zeros(k, c);
    let mut prototypes = Mat::zeros(k, c);
    for j in 0..k {
        let norm = (1.0 + text_alignment * text_alignment).sqrt();
        text.row_mut(j)[j] = 1.0 / norm;
        text.row_mut(j)[k + j] = text_alignment / norm;
        prototypes.row_mut(j)[k + j] = 1.0;
    }
    let mut images = Vec::with_capacity(k * shots);
    for label in 0..k {
        for _ in 0..shots {
            loop {
                let mut data = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    for ch in 0..c {
                        data.push(if ch < k {
                            0.0
                        } else if ch == k + label {
                            1.0
                        } else if ch < 2 * k {
                            0.1 * r.gen_range(-1.0f32..1.0)
                        } else {
                            0.35 * r.gen_range(-1.0f32..1.0)
                        });
                    }
                }
                let spatial = SpatialMap::new(h, w, c, data).expect("sized");
                if cosine_margin(&spatial, &prototypes, label) >= margin {
                    images.push(LabeledImage {
                        label: label as u32,
                        spatial,
                    });
                    break;
                }
            }
        }
    }
    FeatureBundle::new(class_names(k), text, images, h, w).expect("synthetic bundle is valid")
}

/// Own-class cosine minus the best other-class cosine of the mean
/// normalised pixel.
pub fn cosine_margin(spatial: &SpatialMap, text: &Mat, label: usize) -> f64 {
    let px = l2_normalize_rows(&spatial.to_pixels(), NORM_EPS);
    let c = px.cols();
    let mut mean = vec![0.0f64; c];
    for p in 0..px.rows() {
        for (m, v) in mean.iter_mut().zip(px.row(p)) {
            *m += *v as f64 / px.rows() as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let cos: Vec<f64> = (0..text.rows())
        .map(|k| {
            text.row(k)
                .iter()
                .zip(&mean)
                .map(|(t, m)| *t as f64 * m)
                .sum::<f64>()
                / norm
        })
        .collect();
    let other = cos
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if other.is_finite() {
        cos[label] - other
    } else {
        cos[label]
    }
}

/// Replaces class `k`'s text feature with its negation for every `k`,
/// keeping images: each image's true class becomes the least similar one.
pub fn with_negated_text(bundle: &FeatureBundle) -> FeatureBundle {
    let text = bundle.text().scale(-1.0);
    FeatureBundle::new(
        bundle.class_names().to_vec(),
        text,
        bundle.images().to_vec(),
        bundle.dims().h,
        bundle.dims().w,
    )
    .expect("negation keeps unit norms")
}

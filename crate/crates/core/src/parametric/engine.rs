//! Generic forward and hand-derived reverse pass of the parametric attention.
//!
//! Row-vector convention throughout: a linear layer maps `x` to `x W + b`.
//! The element type is generic so the same code runs as the `f32` training
//! path and as the `f64` shadow pass used for finite differences.

use crate::attention::{CalipHyper, ForwardOptions};
use crate::error::Result;
use crate::tensor::{
    column_argmax, l2_normalize_rows, matmul, matmul_transposed, mean_pool, norm, pool_max_avg,
    softmax_rows, Mat, Real, SpatialMap, NORM_EPS,
};

use super::{ProjectionMask, ProjectionParams};

/// Per-image tensors that do not depend on the parameters.
#[derive(Clone, Debug)]
pub(crate) struct Prepared<T: Real> {
    pub s: Mat<T>,
    pub f_v: Mat<T>,
    pub logits_clip: Mat<T>,
}

/// Normalised text features shared by every image.
pub(crate) fn prepare_text<T: Real>(f_t: &Mat) -> Mat<T> {
    l2_normalize_rows(f_t, NORM_EPS).cast()
}

pub(crate) fn prepare<T: Real>(
    spatial: &SpatialMap,
    text: &Mat<T>,
    opts: ForwardOptions,
) -> Result<Prepared<T>> {
    let px = spatial.to_pixels();
    let s: Mat<T> = if opts.normalize_pixels {
        l2_normalize_rows(&px, NORM_EPS).cast()
    } else {
        px.cast()
    };
    let f_v = l2_normalize_rows(&mean_pool(&s)?, NORM_EPS);
    let logits_clip = matmul_transposed(&f_v, text)?;
    Ok(Prepared { s, f_v, logits_clip })
}

/// Everything the reverse pass needs from the forward pass.
#[derive(Clone, Debug)]
pub(crate) struct Trace<T: Real> {
    pub q_s: Mat<T>,
    pub k_s: Mat<T>,
    pub v_s: Mat<T>,
    pub q_t: Mat<T>,
    pub k_t: Mat<T>,
    pub v_t: Mat<T>,
    /// `softmax(Q_s K_tᵀ / √C)`, `HW x K`.
    pub a_s: Mat<T>,
    /// `softmax(Q_t K_sᵀ / √C)`, `K x HW`.
    pub a_t: Mat<T>,
    pub u_s: Mat<T>,
    pub u_t: Mat<T>,
    pub f_s_a: Mat<T>,
    pub f_t_a_raw: Mat<T>,
    pub pooled: Mat<T>,
    pub f_v_a: Mat<T>,
    pub f_t_a: Mat<T>,
    pub logits_fused: Mat<T>,
}

fn linear<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &[T]) -> Result<Mat<T>> {
    let mut y = matmul(x, w)?;
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v = *v + *bias;
        }
    }
    Ok(y)
}

/// Three-term fusion, accumulated in `f64`.
pub(crate) fn fuse<T: Real>(parts: [&Mat<T>; 3], hyper: &CalipHyper) -> Mat<T> {
    let w = [hyper.beta1 as f64, hyper.beta2 as f64, hyper.beta3 as f64];
    let k = parts[0].cols();
    let data = (0..k)
        .map(|j| {
            let mut acc = 0.0f64;
            for (p, wi) in parts.iter().zip(w) {
                if wi != 0.0 {
                    acc += wi * p.get(0, j).as_f64();
                }
            }
            T::from_f64(acc)
        })
        .collect();
    Mat::from_raw(1, k, data)
}

pub(crate) fn forward<T: Real>(
    prep: &Prepared<T>,
    text: &Mat<T>,
    params: &ProjectionParams<T>,
    hyper: &CalipHyper,
    mask: ProjectionMask,
    opts: ForwardOptions,
) -> Result<Trace<T>> {
    let c = text.cols();
    let temperature = (c as f64).sqrt();
    let p = params;

    let pre = |x: &Mat<T>, on: bool| -> Result<[Mat<T>; 3]> {
        if on {
            Ok([
                linear(x, &p.w_q, &p.b_q)?,
                linear(x, &p.w_k, &p.b_k)?,
                linear(x, &p.w_v, &p.b_v)?,
            ])
        } else {
            Ok([x.clone(), x.clone(), x.clone()])
        }
    };
    let [q_s, k_s, v_s] = pre(&prep.s, mask.pre_visual)?;
    let [q_t, k_t, v_t] = pre(text, mask.pre_textual)?;

    let a_s = softmax_rows(&matmul_transposed(&q_s, &k_t)?, temperature)?;
    let a_t = softmax_rows(&matmul_transposed(&q_t, &k_s)?, temperature)?;
    let u_s = matmul(&a_s, &v_t)?;
    let u_t = matmul(&a_t, &v_s)?;

    let f_s_a = if mask.post_visual {
        linear(&u_s, &p.w_post, &p.b_post)?
    } else {
        u_s.clone()
    };
    let f_t_a_raw = if mask.post_textual {
        linear(&u_t, &p.w_post, &p.b_post)?
    } else {
        u_t.clone()
    };

    let pooled = pool_max_avg(&f_s_a)?;
    let (f_v_a, f_t_a) = if opts.renormalize_updates {
        (
            l2_normalize_rows(&pooled, NORM_EPS),
            l2_normalize_rows(&f_t_a_raw, NORM_EPS),
        )
    } else {
        (pooled.clone(), f_t_a_raw.clone())
    };

    let logits_textual = matmul_transposed(&prep.f_v, &f_t_a)?;
    let logits_visual = matmul_transposed(&f_v_a, text)?;
    let logits_fused = fuse([&prep.logits_clip, &logits_textual, &logits_visual], hyper);

    Ok(Trace {
        q_s,
        k_s,
        v_s,
        q_t,
        k_t,
        v_t,
        a_s,
        a_t,
        u_s,
        u_t,
        f_s_a,
        f_t_a_raw,
        pooled,
        f_v_a,
        f_t_a,
        logits_fused,
    })
}

/// Cross-entropy of `softmax(tau * logits)` against `label`, with the
/// gradient w.r.t. the logits.
pub(crate) fn cross_entropy<T: Real>(logits: &Mat<T>, label: usize, tau: f64) -> (f64, Vec<f64>) {
    let z: Vec<f64> = logits.data().iter().map(|v| tau * v.as_f64()).collect();
    // Everything is taken relative to the top logit `m` so that confident
    // predictions keep full precision: the loss is `ln_1p` of a tiny sum
    // rather than a difference of nearly equal log-sum-exps.
    let m = (0..z.len()).fold(0, |m, j| if z[j] > z[m] { j } else { m });
    let e: Vec<f64> = z.iter().map(|v| (v - z[m]).exp()).collect();
    let rest: f64 = e.iter().enumerate().filter(|(j, _)| *j != m).map(|(_, v)| v).sum();
    let loss = (z[m] - z[label]) + rest.ln_1p();
    let grad = (0..z.len())
        .map(|j| {
            let p = e[j] / (1.0 + rest);
            let d = match (j == label, j == m) {
                (true, true) => -rest / (1.0 + rest),
                (true, false) => p - 1.0,
                (false, _) => p,
            };
            tau * d
        })
        .collect();
    (loss, grad)
}

/// Backward through `y = x / |x|` row by row.
fn normalize_backward<T: Real>(x: &Mat<T>, y: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let mut dx = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        if n < NORM_EPS {
            continue;
        }
        let proj: f64 = y
            .row(r)
            .iter()
            .zip(dy.row(r))
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        for ((d, yv), g) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
            *d = T::from_f64((g.as_f64() - yv.as_f64() * proj) / n);
        }
    }
    dx
}

/// Backward through row softmax of `scores / temperature`; returns the
/// gradient w.r.t. the raw scores.
fn softmax_backward<T: Real>(a: &Mat<T>, da: &Mat<T>, temperature: f64) -> Mat<T> {
    let mut ds = Mat::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let inner: f64 = a
            .row(r)
            .iter()
            .zip(da.row(r))
            .map(|(p, g)| p.as_f64() * g.as_f64())
            .sum();
        for ((d, p), g) in ds.row_mut(r).iter_mut().zip(a.row(r)).zip(da.row(r)) {
            *d = T::from_f64(p.as_f64() * (g.as_f64() - inner) / temperature);
        }
    }
    ds
}

fn add_into<T: Real>(acc: &mut Mat<T>, m: &Mat<T>) {
    for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
        *a = *a + *v;
    }
}

fn add_col_sums<T: Real>(acc: &mut [T], m: &Mat<T>) {
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a = *a + *v;
        }
    }
}

/// Loss and parameter gradients for a single image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    prep: &Prepared<T>,
    text: &Mat<T>,
    params: &ProjectionParams<T>,
    trace: &Trace<T>,
    label: usize,
    tau: f64,
    hyper: &CalipHyper,
    mask: ProjectionMask,
    opts: ForwardOptions,
) -> Result<(f64, ProjectionParams<T>)> {
    let c = text.cols();
    let k = text.rows();
    let hw = prep.s.rows();
    let temperature = (c as f64).sqrt();
    let mut grads = ProjectionParams::zeros(c);

    let (loss, dz) = cross_entropy(&trace.logits_fused, label, tau);

    // Fusion: z = b1 clip + b2 F_v F_t^aᵀ + b3 F_v^a F_tᵀ.
    let b2 = hyper.beta2 as f64;
    let b3 = hyper.beta3 as f64;
    let mut d_f_t_a = Mat::<T>::zeros(k, c);
    let mut d_f_v_a = Mat::<T>::zeros(1, c);
    for (j, dzj) in dz.iter().enumerate() {
        let g2 = b2 * dzj;
        if g2 != 0.0 {
            for (d, v) in d_f_t_a.row_mut(j).iter_mut().zip(prep.f_v.row(0)) {
                *d = T::from_f64(g2 * v.as_f64());
            }
        }
    }
    if b3 != 0.0 {
        for (ch, d) in d_f_v_a.row_mut(0).iter_mut().enumerate() {
            let s: f64 = (0..k).map(|j| dz[j] * text.get(j, ch).as_f64()).sum();
            *d = T::from_f64(b3 * s);
        }
    }

    let (d_f_t_a_raw, d_pooled) = if opts.renormalize_updates {
        (
            normalize_backward(&trace.f_t_a_raw, &trace.f_t_a, &d_f_t_a),
            normalize_backward(&trace.pooled, &trace.f_v_a, &d_f_v_a),
        )
    } else {
        (d_f_t_a, d_f_v_a)
    };

    // Pool: 0.5 * (max + mean) per column.
    let argmax = column_argmax(&trace.f_s_a);
    let mut d_f_s_a = Mat::<T>::zeros(hw, c);
    for (ch, &top_row) in argmax.iter().enumerate() {
        let g = 0.5 * d_pooled.get(0, ch).as_f64();
        let share = T::from_f64(g / hw as f64);
        for p in 0..hw {
            d_f_s_a.row_mut(p)[ch] = share;
        }
        let top = &mut d_f_s_a.row_mut(top_row)[ch];
        *top = T::from_f64(top.as_f64() + g);
    }

    // Post projection (shared between the two modalities).
    let d_u_s = if mask.post_visual {
        add_into(&mut grads.w_post, &matmul(&trace.u_s.transpose(), &d_f_s_a)?);
        add_col_sums(&mut grads.b_post, &d_f_s_a);
        matmul_transposed(&d_f_s_a, &params.w_post)?
    } else {
        d_f_s_a
    };
    let d_u_t = if mask.post_textual {
        add_into(&mut grads.w_post, &matmul(&trace.u_t.transpose(), &d_f_t_a_raw)?);
        add_col_sums(&mut grads.b_post, &d_f_t_a_raw);
        matmul_transposed(&d_f_t_a_raw, &params.w_post)?
    } else {
        d_f_t_a_raw
    };

    // U_s = A_s V_t, U_t = A_t V_s.
    let d_a_s = matmul_transposed(&d_u_s, &trace.v_t)?;
    let d_v_t = matmul(&trace.a_s.transpose(), &d_u_s)?;
    let d_a_t = matmul_transposed(&d_u_t, &trace.v_s)?;
    let d_v_s = matmul(&trace.a_t.transpose(), &d_u_t)?;

    // A_s = softmax(Q_s K_tᵀ / √C), A_t = softmax(Q_t K_sᵀ / √C).
    let d_scores_s = softmax_backward(&trace.a_s, &d_a_s, temperature);
    let d_scores_t = softmax_backward(&trace.a_t, &d_a_t, temperature);
    let d_q_s = matmul(&d_scores_s, &trace.k_t)?;
    let d_k_t = matmul(&d_scores_s.transpose(), &trace.q_s)?;
    let d_q_t = matmul(&d_scores_t, &trace.k_s)?;
    let d_k_s = matmul(&d_scores_t.transpose(), &trace.q_t)?;

    // Pre projection. With it disabled for a modality, Q = K = V = input
    // and no parameter sees that branch.
    let mut accumulate = |x: &Mat<T>, dq: &Mat<T>, dk: &Mat<T>, dv: &Mat<T>| -> Result<()> {
        let xt = x.transpose();
        add_into(&mut grads.w_q, &matmul(&xt, dq)?);
        add_into(&mut grads.w_k, &matmul(&xt, dk)?);
        add_into(&mut grads.w_v, &matmul(&xt, dv)?);
        add_col_sums(&mut grads.b_q, dq);
        add_col_sums(&mut grads.b_k, dk);
        add_col_sums(&mut grads.b_v, dv);
        Ok(())
    };
    if mask.pre_visual {
        accumulate(&prep.s, &d_q_s, &d_k_s, &d_v_s)?;
    }
    if mask.pre_textual {
        accumulate(text, &d_q_t, &d_k_t, &d_v_t)?;
    }

    Ok((loss, grads))
}

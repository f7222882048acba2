//! Brute-force reference for both forward passes.
//!
//! Plain `f64` nested vectors and explicit loops, one line per equation.
//! Nothing here calls into the engine.

pub type M = Vec<Vec<f64>>;

pub fn from_flat(rows: usize, cols: usize, data: &[f32]) -> M {
    assert_eq!(data.len(), rows * cols);
    (0..rows)
        .map(|r| data[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn transpose(a: &M) -> M {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

/// `a bᵀ`.
pub fn mul_t(a: &M, b: &M) -> M {
    a.iter()
        .map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

/// `a b`.
pub fn mul(a: &M, b: &M) -> M {
    mul_t(a, &transpose(b))
}

pub fn l2n_row(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n.max(1e-12)).collect()
}

pub fn l2n(a: &M) -> M {
    a.iter().map(|r| l2n_row(r)).collect()
}

pub fn softmax(a: &M, temperature: f64) -> M {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| ((x - m) / temperature).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn mean_rows(a: &M) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn max_avg_rows(a: &M) -> Vec<f64> {
    let mean = mean_rows(a);
    (0..a[0].len())
        .map(|j| {
            let max = a.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            0.5 * (max + mean[j])
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug)]
pub struct Reference {
    /// Zero-shot: `F_s F_tᵀ`. Parametric: `A_s` after the softmax.
    pub attention: M,
    pub f_s: M,
    pub f_t: M,
    pub f_v: Vec<f64>,
    pub f_s_a: M,
    pub f_t_a: M,
    pub f_v_a: Vec<f64>,
    pub clip: Vec<f64>,
    pub textual: Vec<f64>,
    pub visual: Vec<f64>,
    pub cross: Vec<f64>,
    pub fused: Vec<f64>,
}

fn finish(attention: M, f_s: M, f_t: M, f_v: Vec<f64>, f_s_a: M, f_t_a_raw: M, beta: [f64; 3]) -> Reference {
    let f_t_a = l2n(&f_t_a_raw);
    let f_v_a = l2n_row(&max_avg_rows(&f_s_a));
    let clip: Vec<f64> = f_t.iter().map(|t| dot(&f_v, t)).collect();
    let textual: Vec<f64> = f_t_a.iter().map(|t| dot(&f_v, t)).collect();
    let visual: Vec<f64> = f_t.iter().map(|t| dot(&f_v_a, t)).collect();
    let cross: Vec<f64> = f_t_a.iter().map(|t| dot(&f_v_a, t)).collect();
    let fused = (0..clip.len())
        .map(|k| beta[0] * clip[k] + beta[1] * textual[k] + beta[2] * visual[k])
        .collect();
    Reference {
        attention,
        f_s,
        f_t,
        f_v,
        f_s_a,
        f_t_a,
        f_v_a,
        clip,
        textual,
        visual,
        cross,
        fused,
    }
}

/// Zero-shot CALIP with pixel normalisation and re-normalised updates.
pub fn zeroshot(pixels: &M, text: &M, alpha_t: f64, alpha_s: f64, beta: [f64; 3]) -> Reference {
    let f_t = l2n(text);
    let f_s = l2n(pixels);
    let f_v = l2n_row(&mean_rows(&f_s));
    let a = mul_t(&f_s, &f_t);
    let f_s_a = mul(&softmax(&a, alpha_t), &f_t);
    let f_t_a = mul(&softmax(&transpose(&a), alpha_s), &f_s);
    finish(a, f_s, f_t, f_v, f_s_a, f_t_a, beta)
}

/// Projection weights as plain matrices, `y = x W + b`.
pub struct Projections {
    pub w_q: M,
    pub b_q: Vec<f64>,
    pub w_k: M,
    pub b_k: Vec<f64>,
    pub w_v: M,
    pub b_v: Vec<f64>,
    pub w_post: M,
    pub b_post: Vec<f64>,
}

fn linear(x: &M, w: &M, b: &[f64]) -> M {
    mul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

/// Parametric CALIP. `pre`/`post` switch the projections per modality as
/// `[visual, textual]`.
pub fn parametric(pixels: &M, text: &M, p: &Projections, pre: [bool; 2], post: [bool; 2], beta: [f64; 3]) -> Reference {
    let f_t = l2n(text);
    let f_s = l2n(pixels);
    let f_v = l2n_row(&mean_rows(&f_s));
    let c = f_t[0].len() as f64;
    let qkv = |x: &M, on: bool| {
        if on {
            (linear(x, &p.w_q, &p.b_q), linear(x, &p.w_k, &p.b_k), linear(x, &p.w_v, &p.b_v))
        } else {
            (x.clone(), x.clone(), x.clone())
        }
    };
    let (q_s, k_s, v_s) = qkv(&f_s, pre[0]);
    let (q_t, k_t, v_t) = qkv(&f_t, pre[1]);
    let a_s = softmax(&mul_t(&q_s, &k_t), c.sqrt());
    let a_t = softmax(&mul_t(&q_t, &k_s), c.sqrt());
    let u_s = mul(&a_s, &v_t);
    let u_t = mul(&a_t, &v_s);
    let f_s_a = if post[0] { linear(&u_s, &p.w_post, &p.b_post) } else { u_s };
    let f_t_a = if post[1] { linear(&u_t, &p.w_post, &p.b_post) } else { u_t };
    finish(a_s, f_s, f_t, f_v, f_s_a, f_t_a, beta)
}

/// Largest element-wise gap between an `f32` engine buffer and a reference matrix.
pub fn gap(engine: &[f32], reference: &M) -> f64 {
    let flat: Vec<f64> = reference.iter().flatten().copied().collect();
    assert_eq!(engine.len(), flat.len(), "shape mismatch");
    engine
        .iter()
        .zip(&flat)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max)
}

pub fn gap_vec(engine: &[f32], reference: &[f64]) -> f64 {
    gap(engine, &vec![reference.to_vec()])
}

//! Dense row-major matrices and the handful of primitives the attention
//! paths are built from.
//!
//! Storage is 32-bit by default. Every reduction (dot products, sums, the
//! softmax normaliser) accumulates in `f64` regardless of the element type,
//! which keeps long `C = 1024` rows from drifting. [`Mat`] is generic so the
//! parametric engine can run an `f64` shadow pass through the very same
//! kernels when it is being checked against finite differences.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CalipError, Result};

/// Default epsilon below which a row is treated as the zero vector.
pub const NORM_EPS: f64 = 1e-12;

/// Element type of a [`Mat`].
pub trait Real: Float + Default + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl<T: Real> Mat<T> {
    /// Builds a matrix, rejecting a length mismatch or any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CalipError::dim(
                "Mat::new",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CalipError::param(
                "data",
                format!("non-finite value at element {i}"),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Caller guarantees `data.len() == rows * cols`.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(CalipError::dim(
                    "Mat::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Mat::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Mat::from_raw(self.cols, self.rows, out)
    }

    /// Element type conversion, e.g. into the `f64` shadow representation.
    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let mut out = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            out.extend_from_slice(self.row(r));
        }
        Mat::from_raw(order.len(), self.cols, out)
    }

    pub fn scale(&self, k: T) -> Self {
        Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v * k).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|r| norm(self.row(r))).collect()
    }

    /// Index of the largest entry in row `r`; ties go to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum()
}

#[inline]
pub(crate) fn norm<T: Real>(v: &[T]) -> f64 {
    dot(v, v).sqrt()
}

/// Lowest index of the maximum; `0` for an empty slice.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn shape_str<T: Real>(m: &Mat<T>) -> String {
    format!("{}x{}", m.rows, m.cols)
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols != b.rows {
        return Err(CalipError::dim("matmul", shape_str(a), shape_str(b)));
    }
    // b is walked column-wise; transposing once keeps the inner loop contiguous.
    let bt = b.transpose();
    mul_nt(a, &bt, "matmul")
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols != b.cols {
        return Err(CalipError::dim(
            "matmul_transposed",
            shape_str(a),
            format!("({})^T", shape_str(b)),
        ));
    }
    mul_nt(a, b, "matmul_transposed")
}

fn mul_nt<T: Real>(a: &Mat<T>, bt: &Mat<T>, op: &'static str) -> Result<Mat<T>> {
    let mut out = Vec::with_capacity(a.rows * bt.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..bt.rows {
            out.push(T::from_f64(dot(ar, bt.row(j))));
        }
    }
    let m = Mat::from_raw(a.rows, bt.rows, out);
    if !m.is_finite() {
        return Err(CalipError::param(op, "product overflowed to a non-finite value"));
    }
    Ok(m)
}

/// Scales every row to unit Euclidean norm. Rows with norm below `eps`
/// come out as zeros.
pub fn l2_normalize_rows<T: Real>(m: &Mat<T>, eps: f64) -> Mat<T> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let n = norm(row);
        if n < eps {
            row.iter_mut().for_each(|v| *v = T::zero());
        } else {
            row.iter_mut()
                .for_each(|v| *v = T::from_f64(v.as_f64() / n));
        }
    }
    out
}

/// Row-wise softmax of `m / temperature`, max-subtracted for stability.
pub fn softmax_rows<T: Real>(m: &Mat<T>, temperature: f64) -> Result<Mat<T>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(CalipError::param(
            "temperature",
            format!("must be a positive finite number, got {temperature}"),
        ));
    }
    let mut out = m.clone();
    let mut buf = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |acc, v| acc.max(v.as_f64()));
        let mut sum = 0.0;
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = ((v.as_f64() - max) / temperature).exp();
            sum += *b;
        }
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = T::from_f64(b / sum);
        }
    }
    Ok(out)
}

/// Column means over the rows (pixels) of an `HW x C` map.
pub fn mean_pool<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    if m.rows == 0 {
        return Err(CalipError::dim("mean_pool", shape_str(m), "at least one pixel"));
    }
    let n = m.rows as f64;
    let out = column_sums(m).into_iter().map(|s| T::from_f64(s / n)).collect();
    Ok(Mat::from_raw(1, m.cols, out))
}

/// `0.5 * (max_pool + mean_pool)` over the pixels of an `HW x C` map.
pub fn pool_max_avg<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    if m.rows == 0 {
        return Err(CalipError::dim("pool_max_avg", shape_str(m), "at least one pixel"));
    }
    let n = m.rows as f64;
    let sums = column_sums(m);
    let out = (0..m.cols)
        .map(|c| {
            let max = (0..m.rows)
                .map(|r| m.get(r, c).as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            T::from_f64(0.5 * (max + sums[c] / n))
        })
        .collect();
    Ok(Mat::from_raw(1, m.cols, out))
}

/// Row index of the column maximum, first occurrence on ties.
pub(crate) fn column_argmax<T: Real>(m: &Mat<T>) -> Vec<usize> {
    (0..m.cols)
        .map(|c| {
            let mut best = 0;
            for r in 1..m.rows {
                if m.get(r, c) > m.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn column_sums<T: Real>(m: &Mat<T>) -> Vec<f64> {
    let mut sums = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += v.as_f64();
        }
    }
    sums
}

/// An `H x W x C` feature map stored in `(h, w, c)` order.
///
/// Flat pixel index `p = h_index * w + w_index`, so the buffer is already
/// the row-major `HW x C` matrix the attention operates on.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SpatialMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl SpatialMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(CalipError::dim(
                "SpatialMap::new",
                format!("{h}x{w}x{c}"),
                format!("{} elements", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CalipError::param(
                "spatial",
                format!("non-finite value at element {i}"),
            ));
        }
        Ok(SpatialMap { h, w, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, hi: usize, wi: usize) -> &[f32] {
        let p = hi * self.w + wi;
        &self.data[p * self.c..(p + 1) * self.c]
    }

    /// The map viewed as an `HW x C` matrix.
    pub fn to_pixels(&self) -> Mat {
        Mat::from_raw(self.h * self.w, self.c, self.data.clone())
    }

    pub fn into_pixels(self) -> Mat {
        Mat::from_raw(self.h * self.w, self.c, self.data)
    }

    /// Inverse of [`SpatialMap::to_pixels`] for a given grid.
    pub fn from_pixels(h: usize, w: usize, pixels: &Mat) -> Result<Self> {
        if pixels.rows() != h * w {
            return Err(CalipError::dim(
                "SpatialMap::from_pixels",
                format!("{h}x{w} grid"),
                format!("{} pixel rows", pixels.rows()),
            ));
        }
        SpatialMap::new(h, w, pixels.cols(), pixels.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Mat::new(rows, cols, data).unwrap()
    }

    fn triple_loop(a: &Mat, b: &Mat) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let b = Mat::from_rows(&[[3.0f32, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Mat::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_by_identity() {
        let a = Mat::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let out = matmul(&a, &Mat::identity(2).transpose()).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(3, 4, 1);
        let b = random(4, 2, 2);
        let got = matmul(&a, &b).unwrap();
        for (g, o) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((*g as f64 - o).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&random(2, 3, 0), &random(2, 3, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, CalipError::Dimension { .. }));
    }

    #[test]
    fn normalize_345() {
        let m = Mat::from_rows(&[[3.0f32, 4.0]]).unwrap();
        let n = l2_normalize_rows(&m, NORM_EPS);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-7);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_zero_row_passes_through() {
        let m = Mat::from_rows(&[[0.0f32, 0.0]]).unwrap();
        assert_eq!(l2_normalize_rows(&m, NORM_EPS).data(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_random_rows_unit() {
        let n = l2_normalize_rows(&random(5, 7, 3), NORM_EPS);
        for r in n.row_norms() {
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        for t in [0.01, 1.0, 50.0] {
            let s = softmax_rows(&Mat::from_rows(&[[7.0f32; 3]]).unwrap(), t).unwrap();
            for v in s.data() {
                assert!((*v as f64 - 1.0 / 3.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_large_gap_no_overflow() {
        let s = softmax_rows(&Mat::from_rows(&[[1000.0f32, 0.0]]).unwrap(), 1.0).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(s.get(0, 1).abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = softmax_rows(&Mat::from_rows(&[[1.0f32, 2.0, 3.0]]).unwrap(), 2.0).unwrap();
        let e: Vec<f64> = [0.5f64, 1.0, 1.5].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let m = random(1, 3, 0);
        assert!(matches!(softmax_rows(&m, 0.0), Err(CalipError::Parameter { .. })));
        assert!(matches!(softmax_rows(&m, -2.0), Err(CalipError::Parameter { .. })));
    }

    #[test]
    fn pool_single_pixel() {
        let m = Mat::from_rows(&[[2.0f32, 4.0]]).unwrap();
        assert_eq!(pool_max_avg(&m).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(mean_pool(&m).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn pool_max_avg_hand_checked() {
        let m = Mat::from_rows(&[[0.0f32, 0.0], [2.0, 2.0]]).unwrap();
        assert_eq!(pool_max_avg(&m).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn pool_column_permutation() {
        let m = random(5, 3, 9);
        let perm = [2usize, 0, 1];
        let permuted = m.transpose().select_rows(&perm).transpose();
        let a = pool_max_avg(&m).unwrap();
        let b = pool_max_avg(&permuted).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            assert_eq!(b.get(0, j), a.get(0, p));
        }
    }

    #[test]
    fn mean_pool_cases() {
        let m = Mat::from_rows(&[[1.0f32, 3.0], [3.0, 1.0]]).unwrap();
        assert_eq!(mean_pool(&m).unwrap().data(), &[2.0, 2.0]);

        let r = random(4, 3, 11);
        let got = mean_pool(&r).unwrap();
        for c in 0..3 {
            let want: f64 = (0..4).map(|p| r.get(p, c) as f64).sum::<f64>() / 4.0;
            assert!((got.get(0, c) as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_pool_is_dimension_error() {
        let m: Mat = Mat::zeros(0, 3);
        assert!(matches!(mean_pool(&m), Err(CalipError::Dimension { .. })));
        assert!(matches!(pool_max_avg(&m), Err(CalipError::Dimension { .. })));
    }

    #[test]
    fn new_rejects_nan() {
        assert!(Mat::new(1, 2, vec![1.0f32, f32::NAN]).is_err());
        assert!(Mat::new(1, 3, vec![1.0f32, 2.0]).is_err());
    }

    #[test]
    fn spatial_pixel_index_identity() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32).collect();
        let s = SpatialMap::new(2, 3, 4, data).unwrap();
        let px = s.to_pixels();
        for hi in 0..2 {
            for wi in 0..3 {
                assert_eq!(s.pixel(hi, wi), px.row(hi * 3 + wi));
            }
        }
    }

    fn mat_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Mat> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            prop::collection::vec(-100.0f32..100.0, r * c)
                .prop_map(move |d| Mat::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in mat_strategy(6, 9), t in 1e-3f64..1e3) {
            let s = softmax_rows(&m, t).unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(m in mat_strategy(4, 6), shift in -50.0f32..50.0) {
            let shifted = Mat::new(m.rows(), m.cols(), m.data().iter().map(|v| v + shift).collect()).unwrap();
            let a = softmax_rows(&m, 1.5).unwrap();
            let b = softmax_rows(&shifted, 1.5).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }

        #[test]
        fn softmax_preserves_strict_argmax(m in mat_strategy(4, 6), t in 1e-2f64..1e2) {
            let s = softmax_rows(&m, t).unwrap();
            for r in 0..m.rows() {
                let row = m.row(r);
                let best = argmax(row);
                let strict = row.iter().enumerate().all(|(i, &v)| i == best || v < row[best]);
                let distinct_out = s.row(r).iter().enumerate().all(|(i, &v)| i == best || v < s.get(r, best));
                if strict && distinct_out {
                    prop_assert_eq!(s.argmax_row(r), best);
                }
            }
        }

        #[test]
        fn normalize_idempotent(m in mat_strategy(6, 9)) {
            let once = l2_normalize_rows(&m, NORM_EPS);
            let twice = l2_normalize_rows(&once, NORM_EPS);
            prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-6);
        }

        #[test]
        fn pools_invariant_under_pixel_permutation(m in mat_strategy(8, 5), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..m.rows()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p = m.select_rows(&order);
            prop_assert!(pool_max_avg(&m).unwrap().max_abs_diff(&pool_max_avg(&p).unwrap()).unwrap() < 1e-5);
            prop_assert!(mean_pool(&m).unwrap().max_abs_diff(&mean_pool(&p).unwrap()).unwrap() < 1e-5);
        }

        #[test]
        fn matmul_agrees_with_naive(r in 1usize..64, k in 1usize..64, c in 1usize..64, seed in any::<u64>()) {
            let a = random(r, k, seed);
            let b = random(k, c, seed.wrapping_add(1));
            let got = matmul(&a, &b).unwrap();
            for (g, o) in got.data().iter().zip(triple_loop(&a, &b)) {
                prop_assert!((*g as f64 - o).abs() <= 1e-5 * o.abs().max(1.0));
            }
        }
    }
}

//! Dense row-major matrices, a seeded random stream, and the small set of
//! numeric kernels the rest of the crate is built from.
//!
//! Everything here is `f64`. Shapes are never broadcast implicitly: an
//! operation either receives the shapes it documents or returns
//! [`Error::DimensionMismatch`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper clamp applied to uniform samples before the Gumbel transform.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims("Matrix::from_vec", "positive dimensions", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::dims("Matrix::from_rows", d, format!("row {i} of length {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, d, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(op, fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "Matrix::add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "Matrix::sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "Matrix::hadamard")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "Matrix::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        self.same_shape(other, "Matrix::axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "Matrix::matmul",
                format!("inner dimension {}", self.cols),
                other.rows,
            ));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let a_row = &self.data[i * m..(i + 1) * m];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: n, cols: p, data: out })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dims("Matrix::t_matmul", self.rows, other.rows));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * p];
        for r in 0..n {
            let a_row = &self.data[r * m..(r + 1) * m];
            let b_row = &other.data[r * p..(r + 1) * p];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * p..(i + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: m, cols: p, data: out })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dims("Matrix::matmul_t", self.cols, other.cols));
        }
        let (n, m, p) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let a_row = &self.data[i * m..(i + 1) * m];
            for j in 0..p {
                let b_row = &other.data[j * m..(j + 1) * m];
                out[i * p + j] = dot(a_row, b_row);
            }
        }
        Ok(Self { rows: n, cols: p, data: out })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_dist_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Squared Euclidean distance `Σ (a_d − b_d)²`.
pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("sq_euclidean", a.len(), b.len()));
    }
    Ok(sq_dist_unchecked(a, b))
}

/// Tempered softmax `exp(x/τ) / Σ exp(x/τ)`, evaluated with max subtraction.
pub fn softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("softmax_t", format!("temperature must be positive and finite, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("softmax_t", "empty logits"));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax_t", format!("non-finite logit {bad}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, tau, &mut out);
    Ok(out)
}

/// Unchecked tempered softmax into `out`; callers guarantee finite input and τ > 0.
pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inv = 1.0 / tau;
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        let e = ((x - max) * inv).exp();
        *o = e;
        total += e;
    }
    let norm = 1.0 / total;
    for o in out.iter_mut() {
        *o *= norm;
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Index of the smallest entry; ties go to the smallest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = j;
        }
    }
    best
}

/// Gumbel transform of a uniform sample, `−ln(−ln u)`, with `u` clamped
/// to `[1e-12, 1 − 1e-12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Seeded random stream backed by ChaCha8.
///
/// The generator, the 53-bit uniform conversion, Box–Muller normals and the
/// Gumbel transform are all fixed here so that a seed pins every sample the
/// crate draws, independent of platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Each `stream` id yields a distinct generator
    /// for the same parent seed; the parent is not advanced.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box–Muller (one value per call, two uniforms consumed).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }

    /// `n` independent standard Gumbel samples.
    pub fn sample_gumbel(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gumbel()).collect()
    }

    /// Draw an index with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return i;
            }
            target -= w;
        }
        // Rounding can leave a sliver past the last positive weight.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix { rows, cols, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sq_euclidean_examples() {
        assert_eq!(sq_euclidean(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        // 3² + 4² + 0²
        assert_eq!(sq_euclidean(&[1.0, 2.0, 3.0], &[4.0, 6.0, 3.0]).unwrap(), 25.0);
        assert!(matches!(
            sq_euclidean(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_t(&[0.7, 0.7, 0.7], 1.0).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = std::f64::consts::E;
        let p = softmax_t(&[0.0, 1.0], 1.0).unwrap();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5 && (p[1] - 0.73106).abs() < 1e-5);
        let cold = softmax_t(&[0.0, 1.0], 0.01).unwrap();
        assert!((cold[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_t(&[0.0, 1.0], 0.0).is_err());
        assert!(softmax_t(&[0.0, 1.0], -1.0).is_err());
        assert!(softmax_t(&[f64::NAN, 1.0], 1.0).is_err());
        assert!(softmax_t(&[f64::INFINITY, 1.0], 1.0).is_err());
    }

    #[test]
    fn gumbel_transform_examples() {
        let half = gumbel_from_uniform(0.5);
        assert!((half - (-(-(0.5f64).ln()).ln())).abs() < 1e-15);
        assert!((half - 0.36651).abs() < 1e-5);
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_sample_mean_is_euler_mascheroni() {
        let mut rng = SeededRng::new(7);
        let n = 100_000;
        let mean = rng.sample_gumbel(n).iter().sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_901_532_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn rng_reproducible_and_forks_differ() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut f1 = SeededRng::new(42).fork(1);
        let mut f2 = SeededRng::new(42).fork(2);
        assert_ne!(f1.next_u64(), f2.next_u64());
        let mut g1 = SeededRng::new(42).fork(1);
        let mut again = SeededRng::new(42).fork(1);
        assert_eq!(g1.next_u64(), again.next_u64());
    }

    #[test]
    fn uniform_stays_open() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = SeededRng::new(11);
        for _ in 0..1000 {
            let i = rng.categorical(&[0.0, 2.0, 0.0, 1.0]);
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.5], [0.0, -1.0], [2.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, Matrix::from_rows(&[[7.0, 1.5], [16.0, 3.0]]).unwrap());
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.8]), 1);
        assert_eq!(argmin(&[1.0, 0.0, 0.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            log_tau in -3.0f64..3.0,
        ) {
            let tau = 10f64.powf(log_tau);
            let p = softmax_t(&logits, tau).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn sq_euclidean_symmetric_and_definite(
            pair in (1usize..8).prop_flat_map(|n| (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            ))
        ) {
            let (a, b) = pair;
            let ab = sq_euclidean(&a, &b).unwrap();
            prop_assert_eq!(ab, sq_euclidean(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
            prop_assert_eq!(sq_euclidean(&a, &a).unwrap(), 0.0);
        }
    }
}

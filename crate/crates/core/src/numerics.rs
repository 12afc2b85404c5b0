//! Dense real-valued kernel: row-major matrices, matrix product, masked softmax
//! and a seeded generator.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Scalar type of the kernel. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Row-major dense matrix.
///
/// Values are finite except in additive masks, where `-inf` marks a forbidden entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: Real) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Matrix of values drawn uniformly from `[lo, hi)`.
    pub fn random(rows: usize, cols: usize, lo: Real, hi: Real, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Matrix { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: Real) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Real> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&mut self, factor: Real) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Matrix::add",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

/// Matrix product with a fixed left-to-right summation order per output cell.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Execution::Sequential)
}

/// [`matmul`] with rows of the output optionally computed in parallel.
/// Each output cell is summed in the same order either way, so the result is
/// bitwise identical.
pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Execution) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            format!("rhs rows {}", b.rows),
        ));
    }
    let n = b.cols;
    let rows = exec.map_range(a.rows, |i| {
        let mut out = vec![0.0; n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let brow = b.row(k);
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
        out
    });
    Ok(Matrix {
        rows: a.rows,
        cols: n,
        data: rows.concat(),
    })
}

/// Row softmax restricted to entries where `mask` is zero.
///
/// `mask` entries must be exactly `0` or `-inf`. Masked entries come out as
/// exactly zero; a row with no allowed entry comes out all zero.
pub fn masked_row_softmax(scores: &Matrix, mask: &Matrix) -> Result<Matrix> {
    if scores.shape() != mask.shape() {
        return Err(Error::shape(
            "masked_row_softmax",
            format!("{:?}", scores.shape()),
            format!("mask {:?}", mask.shape()),
        ));
    }
    if let Some(bad) = mask
        .data
        .iter()
        .find(|&&v| !(v == 0.0 || v == Real::NEG_INFINITY))
    {
        return Err(Error::invalid(format!(
            "mask entries must be 0 or -inf, found {bad}"
        )));
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        softmax_row_into(scores.row(i), mask.row(i), out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_row_into(scores: &[Real], mask: &[Real], out: &mut [Real]) {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 0.0)
        .map(|(&s, _)| s)
        .fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m == 0.0 { (s - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Seeded generator backed by ChaCha8, whose output stream is fixed across
/// platforms for a given seed.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, stream)`; used to give train/eval data
    /// and parameter init their own sequences.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: Real, hi: Real) -> Real {
        let u: f64 = self.inner.gen();
        lo + (hi - lo) * u as Real
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    const NEG_INF: Real = Real::NEG_INFINITY;

    fn m(rows: &[&[Real]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_b_is_b() {
        let b = m(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn hand_multiplied_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn empty_contraction_gives_zero() {
        let a = Matrix::zeros(1, 0);
        let b = Matrix::zeros(0, 1);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::zeros(1, 1));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn parallel_matmul_is_bitwise_identical() {
        let mut rng = Rng::seeded(3);
        let a = Matrix::random(37, 19, -1.0, 1.0, &mut rng);
        let b = Matrix::random(19, 23, -1.0, 1.0, &mut rng);
        assert_eq!(
            matmul_with(&a, &b, Execution::Sequential).unwrap(),
            matmul_with(&a, &b, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn softmax_uniform_row() {
        let s = m(&[&[0.7, 0.7, 0.7]]);
        let w = masked_row_softmax(&s, &Matrix::zeros(1, 3)).unwrap();
        for j in 0..3 {
            assert!((w.get(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_allowed_entry() {
        let w = masked_row_softmax(&m(&[&[0.0, 0.0]]), &m(&[&[0.0, NEG_INF]])).unwrap();
        assert_eq!(w, m(&[&[1.0, 0.0]]));
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn softmax_ln2_row() {
        let w = masked_row_softmax(&m(&[&[2f64.ln(), 0.0]]), &Matrix::zeros(1, 2)).unwrap();
        assert!((w.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let w = masked_row_softmax(&m(&[&[1.0, 2.0]]), &m(&[&[NEG_INF, NEG_INF]])).unwrap();
        assert_eq!(w, Matrix::zeros(1, 2));
    }

    #[test]
    fn softmax_rejects_bad_mask_and_shapes() {
        assert!(masked_row_softmax(&Matrix::zeros(1, 2), &m(&[&[0.0, -1.0]])).is_err());
        assert!(masked_row_softmax(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u64> = {
            let mut r = Rng::seeded(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let mut r = Rng::seeded(42);
        assert!(a.iter().all(|&x| x == r.next_u64()));
        let mut s = Rng::with_stream(42, 1);
        assert_ne!(a[0], s.next_u64());
    }

    #[cfg(not(feature = "f32"))]
    fn random_mask(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| if rng.bernoulli(0.3) { NEG_INF } else { 0.0 })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        #[cfg(not(feature = "f32"))]
        fn matmul_is_associative(seed: u64, n in 1usize..8, k in 1usize..8, p in 1usize..8, q in 1usize..8) {
            let mut rng = Rng::seeded(seed);
            let a = Matrix::random(n, k, -1.0, 1.0, &mut rng);
            let b = Matrix::random(k, p, -1.0, 1.0, &mut rng);
            let c = Matrix::random(p, q, -1.0, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }

        #[test]
        #[cfg(not(feature = "f32"))]
        fn softmax_rows_are_stochastic(seed: u64, rows in 1usize..6, cols in 1usize..12, shift in -50.0f64..50.0) {
            let mut rng = Rng::seeded(seed);
            let s = Matrix::random(rows, cols, -20.0, 20.0, &mut rng);
            let mask = random_mask(rows, cols, &mut rng);
            let w = masked_row_softmax(&s, &mask).unwrap();
            for i in 0..rows {
                let any = mask.row(i).contains(&0.0);
                let sum: f64 = w.row(i).iter().sum();
                let ok = if any { (sum - 1.0).abs() < 1e-12 } else { sum == 0.0 };
                prop_assert!(ok, "row {} sums to {}", i, sum);
                for j in 0..cols {
                    if mask.get(i, j) != 0.0 {
                        prop_assert_eq!(w.get(i, j), 0.0);
                    }
                }
            }
            let mut shifted = s.clone();
            shifted.as_mut_slice().iter_mut().for_each(|x| *x += shift);
            let w2 = masked_row_softmax(&shifted, &mask).unwrap();
            prop_assert!(w.max_abs_diff(&w2) < 1e-12);
        }
    }
}

//! Dense row-major matrices, softmax, norms and a portable seeded RNG.
//!
//! Everything here is `f64` and allocation-simple. Performance is not a goal;
//! determinism and clear shapes are.

use crate::error::{Error, Result};
use crate::masks::BoolMatrix;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::shape(
                "push_row",
                format!("row of length {} into {} columns", row.len(), self.cols),
            ));
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        for r in other.row_iter() {
            out.push_row(r)?;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with optional mask (`true` = kept).
///
/// Masked logits behave as `-inf`: they are excluded from the row maximum and
/// come out as exact zeros.
pub fn row_softmax(m: &Matrix, mask: Option<&BoolMatrix>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(Error::shape(
                "row_softmax",
                format!("mask {:?} vs logits {:?}", mask.shape(), m.shape()),
            ));
        }
    }
    let allowed = |i: usize, j: usize| mask.is_none_or(|mk| mk.get(i, j));
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let max = (0..m.cols)
            .filter(|&j| allowed(i, j))
            .map(|j| m.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..m.cols {
            if allowed(i, j) {
                let e = (m.get(i, j) - max).exp();
                out.set(i, j, e);
                sum += e;
            }
        }
        for v in out.row_mut(i) {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Euclidean norm of every row.
pub fn l2_norm_rows(v: &Matrix) -> Result<Vec<f64>> {
    if v.rows == 0 {
        return Err(Error::shape("l2_norm_rows", "empty matrix"));
    }
    Ok(v.row_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect())
}

/// SplitMix64: a 64-bit counter-based generator.
///
/// Output `i` is `mix(seed + (i + 1) * GOLDEN_GAMMA)`, so any element of the
/// stream can be computed independently and results are identical on every
/// platform.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for `(seed, index)`, used to derive per-task RNGs.
    pub fn derive(seed: u64, index: u64) -> Self {
        Self::new(mix64(seed ^ mix64(index.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection, free of modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_gaussian(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `rows × cols` matrix of standard normal draws from `SplitMix64(seed)`,
/// filled in row-major order.
pub fn seeded_gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0, 0.0], vec![4.0, 0.25, 9.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![3.0], vec![7.0]]).unwrap());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(3, 2);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = row_softmax(&m, None).unwrap();
        for &x in s.row(0) {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }

        let m = Matrix::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let s = row_softmax(&m, None).unwrap();
        assert!(close(s.get(0, 0), 0.25, 1e-15));
        assert!(close(s.get(0, 1), 0.75, 1e-15));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let m = Matrix::from_rows(&[vec![1000.0, 1000.1]]).unwrap();
        let s = row_softmax(&m, None).unwrap();
        assert!(s.all_finite());
        assert!(close(s.row(0).iter().sum(), 1.0, 1e-12));
    }

    #[test]
    fn softmax_mask_zeroes_and_errors() {
        let m = Matrix::from_rows(&[vec![5.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let mask = BoolMatrix::from_fn(2, 3, |i, j| i == 0 && j != 0);
        let err = row_softmax(&m, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));

        let mask = BoolMatrix::from_fn(2, 3, |_, j| j != 0);
        let s = row_softmax(&m, Some(&mask)).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert!(close(s.get(1, 1), 0.5, 1e-15));
        // The masked 5.0 must not take part in the max: row 0 stays well scaled.
        let e = 1f64.exp();
        assert!(close(s.get(0, 2), e / (1.0 + e), 1e-15));
    }

    #[test]
    fn l2_norms() {
        let v = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(l2_norm_rows(&v).unwrap(), vec![5.0, 0.0]);
        assert_eq!(
            l2_norm_rows(&Matrix::identity(2)).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(l2_norm_rows(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn gaussian_is_reproducible_and_seed_sensitive() {
        assert_eq!(seeded_gaussian(2, 2, 7), seeded_gaussian(2, 2, 7));
        assert_ne!(seeded_gaussian(2, 2, 7), seeded_gaussian(2, 2, 8));
    }

    #[test]
    fn gaussian_sample_moments() {
        let m = seeded_gaussian(1, 10_000, 1);
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 0 from the published SplitMix64 reference.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    fn small_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-3.0f64..3.0, n * n)
            .prop_map(move |v| Matrix::from_vec(n, n, v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let m = Matrix::from_rows(&[row]).unwrap();
            let s = row_softmax(&m, None).unwrap();
            prop_assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let a = Matrix::from_rows(std::slice::from_ref(&row)).unwrap();
            let b = Matrix::from_rows(&[row.iter().map(|x| x + c).collect()]).unwrap();
            let sa = row_softmax(&a, None).unwrap();
            let sb = row_softmax(&b, None).unwrap();
            prop_assert!(sa.max_abs_diff(&sb) < 1e-6);
        }

        #[test]
        fn matmul_associative(a in small_matrix(8), b in small_matrix(8), c in small_matrix(8)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-5);
        }

        #[test]
        fn norms_absolutely_homogeneous(v in small_matrix(4), c in -10.0f64..10.0) {
            let base = l2_norm_rows(&v).unwrap();
            let scaled = l2_norm_rows(&v.scale(c)).unwrap();
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((s - c.abs() * b).abs() < 1e-6);
            }
        }
    }
}

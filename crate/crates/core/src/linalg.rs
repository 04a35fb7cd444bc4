//! Dense row-major matrices and the handful of row kernels the attention
//! code is built from. Everything is `f64`.

use std::ops::Deref;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static ZERO_NORM_COSINES: AtomicU64 = AtomicU64::new(0);

/// Number of `cosine` calls that hit a zero-norm argument since process start.
pub fn zero_norm_cosine_count() -> u64 {
    ZERO_NORM_COSINES.load(Ordering::Relaxed)
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::new", rows * cols, data.len()));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows. `cols` is needed so that an
    /// empty row list still carries a width.
    pub fn from_rows<R: AsRef<[f64]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// A finite vector of `f64`; dereferences to a slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowVector(Vec<f64>);

impl RowVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self(data))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RowVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("lhs.cols == rhs.rows ({})", a.cols),
            b.rows,
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Softmax restricted to a support, with its normalizer and the max used
/// for stabilization.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxRow {
    pub probs: Vec<f64>,
    /// `sum(exp(score - max_score))` over the support.
    pub normalizer: f64,
    pub max_score: f64,
}

/// Max-subtracted softmax over every entry of `scores`.
pub(crate) fn softmax_dense(scores: &[f64]) -> SoftmaxRow {
    let max_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scores.iter().map(|s| (s - max_score).exp()).collect();
    let normalizer: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= normalizer;
    }
    SoftmaxRow {
        probs,
        normalizer,
        max_score,
    }
}

pub fn masked_softmax_row(scores: &[f64], mask: &[bool]) -> Result<SoftmaxRow> {
    if scores.len() != mask.len() {
        return Err(Error::dim("masked_softmax_row", scores.len(), mask.len()));
    }
    let max_score = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_score == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let mut probs: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max_score).exp() } else { 0.0 })
        .collect();
    let normalizer: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= normalizer;
    }
    Ok(SoftmaxRow {
        probs,
        normalizer,
        max_score,
    })
}

/// Cosine similarity. A zero-norm argument yields 0.0 and bumps
/// [`zero_norm_cosine_count`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine", u.len(), v.len()));
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        ZERO_NORM_COSINES.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    // sqrt(uu * uu) == uu exactly, so cosine(u, u) is exactly 1
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(RowVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let id = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Matrix::new(2, 2, vec![0.3, -1.5, 2.0, 7.25]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 8, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_uniform() {
        let s = masked_softmax_row(&[0.0, 0.0, 0.0], &[true; 3]).unwrap();
        for p in &s.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.normalizer, 3.0);
        assert_eq!(s.max_score, 0.0);
    }

    #[test]
    fn softmax_single_support() {
        let s = masked_softmax_row(&[10.0, -10.0], &[true, false]).unwrap();
        assert_eq!(s.probs, vec![1.0, 0.0]);
        assert_eq!(s.normalizer, 1.0);
    }

    #[test]
    fn softmax_masked_pair_matches_direct_sum() {
        let s = masked_softmax_row(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        let z = 1f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 0.0, 3f64.exp() / z];
        for (p, e) in s.probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert!((s.normalizer - z / 3f64.exp()).abs() < 1e-15);
        assert_eq!(s.max_score, 3.0);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            masked_softmax_row(&[1.0, 2.0], &[false, false]),
            Err(Error::EmptySupport)
        ));
        assert!(matches!(
            masked_softmax_row(&[1.0], &[true, true]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_zero_norm_is_flagged() {
        let before = zero_norm_cosine_count();
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(zero_norm_cosine_count() > before);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(
            scores in prop::collection::vec(-350.0f64..350.0, 1..40),
            mask_bits in prop::collection::vec(any::<bool>(), 40),
        ) {
            let mut mask: Vec<bool> = mask_bits[..scores.len()].to_vec();
            mask[0] = true;
            let s = masked_softmax_row(&scores, &mask).unwrap();
            let total: f64 = s.probs.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (p, m) in s.probs.iter().zip(&mask) {
                if !m { prop_assert_eq!(*p, 0.0); }
            }
        }

        #[test]
        fn softmax_shift_invariant(
            scores in prop::collection::vec(-50.0f64..50.0, 1..30),
            shift in -100.0f64..100.0,
        ) {
            let mask = vec![true; scores.len()];
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let a = masked_softmax_row(&scores, &mask).unwrap();
            let b = masked_softmax_row(&shifted, &mask).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_self_and_scale(
            u in prop::collection::vec(-10.0f64..10.0, 1..20),
            v in prop::collection::vec(-10.0f64..10.0, 20),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(u.iter().any(|x| *x != 0.0));
            let v = &v[..u.len()];
            prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() <= 1e-12);
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let a = cosine(&u, v).unwrap();
            let b = cosine(&scaled, v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn matmul_agrees_with_oracle(seed in any::<u64>(), m in 1usize..64, k in 1usize..64, n in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let got = matmul(&a, &b).unwrap();
            for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
                prop_assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0));
            }
        }
    }
}

//! Reference attention: dense causal, masked sparse with renormalization over
//! the selected keys, and the dense single-token decode step.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_dense, Matrix, RowVector};

/// One head's already-projected queries, keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProblem {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scale: f64,
}

impl AttentionProblem {
    /// Problem with the usual `1/sqrt(d)` score scale.
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        let scale = 1.0 / (q.cols() as f64).sqrt();
        Self::with_scale(q, k, v, scale)
    }

    pub fn with_scale(q: Matrix, k: Matrix, v: Matrix, scale: f64) -> Result<Self> {
        let shape = |m: &Matrix| format!("{}x{}", m.rows(), m.cols());
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::dim("AttentionProblem", "N >= 1 and d >= 1", shape(&q)));
        }
        for other in [&k, &v] {
            if other.rows() != q.rows() || other.cols() != q.cols() {
                return Err(Error::dim("AttentionProblem", shape(&q), shape(other)));
            }
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config("scale", format!("must be positive, got {scale}")));
        }
        Ok(Self { q, k, v, scale })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// Pre-softmax score of query `i` against key `j`.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scale * dot(self.q.row(i), self.k.row(j))
    }

    /// Causal scores of row `i`: keys `0..=i`.
    pub fn causal_scores(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|j| self.score(i, j)).collect()
    }
}

/// Lower-triangular boolean mask, row-major `n x n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    n: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                bits[i * n + j] = f(i, j);
            }
        }
        Self { n, bits }
    }

    pub fn full_causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    fn validate(&self) -> Result<()> {
        if self.bits.len() != self.n * self.n {
            return Err(Error::Pattern(format!(
                "mask holds {} bits, expected {}",
                self.bits.len(),
                self.n * self.n
            )));
        }
        for i in 0..self.n {
            if (i + 1..self.n).any(|j| self.get(i, j)) {
                return Err(Error::Pattern(format!("mask row {i} selects a future key")));
            }
            if !(0..=i).any(|j| self.get(i, j)) {
                return Err(Error::Pattern(format!("mask row {i} selects no key")));
            }
        }
        Ok(())
    }
}

/// Which attention entries a sparse method computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityPattern {
    /// Streaming-style: the first `sink` keys plus the last `window` keys
    /// up to and including the diagonal.
    SinkWindow { sink: usize, window: usize },
    /// The `k` largest pre-softmax scores of each row.
    OracleTopK { k: usize },
    Explicit(Mask),
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityPattern::SinkWindow { sink, window } => write!(f, "sink_window({sink},{window})"),
            SparsityPattern::OracleTopK { k } => write!(f, "oracle_top_k({k})"),
            SparsityPattern::Explicit(m) => write!(f, "explicit({})", m.n()),
        }
    }
}

impl SparsityPattern {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            SparsityPattern::SinkWindow { window, .. } if *window == 0 => {
                Err(Error::Pattern("sink_window needs window >= 1".into()))
            }
            SparsityPattern::OracleTopK { k } if *k == 0 => {
                Err(Error::Pattern("oracle_top_k needs k >= 1".into()))
            }
            SparsityPattern::Explicit(mask) => {
                if mask.n() != n {
                    return Err(Error::Pattern(format!(
                        "mask is {0}x{0}, problem has N = {n}",
                        mask.n()
                    )));
                }
                mask.validate()
            }
            _ => Ok(()),
        }
    }

    /// Number of keys row `i` selects, without looking at scores.
    pub fn row_count(&self, i: usize) -> usize {
        match self {
            SparsityPattern::SinkWindow { sink, window } => {
                let window_start = (i + 1).saturating_sub(*window);
                // sink keys strictly below the window start are extra
                window_start.min(*sink) + (i + 1 - window_start)
            }
            SparsityPattern::OracleTopK { k } => (*k).min(i + 1),
            SparsityPattern::Explicit(mask) => (0..=i).filter(|&j| mask.get(i, j)).count(),
        }
    }

    /// Ascending key indices row `i` attends to. `scores` are the causal
    /// scores of the row and are only consulted by `OracleTopK`.
    pub fn select(&self, i: usize, scores: &[f64]) -> Vec<usize> {
        match self {
            SparsityPattern::SinkWindow { sink, window } => {
                let window_start = (i + 1).saturating_sub(*window);
                (0..window_start.min(*sink)).chain(window_start..=i).collect()
            }
            SparsityPattern::OracleTopK { k } => top_k_indices(scores, *k),
            SparsityPattern::Explicit(mask) => (0..=i).filter(|&j| mask.get(i, j)).collect(),
        }
    }
}

/// Indices of the `k` largest scores, ascending. Ties go to the larger index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    if k >= scores.len() {
        return (0..scores.len()).collect();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(b.cmp(a))
    };
    idx.select_nth_unstable_by(k - 1, by_rank);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Output plus bookkeeping for every row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub output: Matrix,
    /// `sum(exp(s - row_max))` over the keys the row attended to.
    pub row_normalizers: Vec<f64>,
    /// Stabilizer used for each row's normalizer.
    pub row_max_scores: Vec<f64>,
    pub computed_entries: Vec<usize>,
}

impl AttentionResult {
    pub fn total_entries(&self) -> u64 {
        self.computed_entries.iter().map(|&c| c as u64).sum()
    }

    /// Natural log of the unstabilized normalizer of row `i`.
    pub fn log_normalizer(&self, i: usize) -> f64 {
        self.row_normalizers[i].ln() + self.row_max_scores[i]
    }

    pub(crate) fn from_rows(d: usize, rows: Vec<RowAttention>) -> Self {
        let mut output = Matrix::zeros(rows.len(), d);
        let mut row_normalizers = Vec::with_capacity(rows.len());
        let mut row_max_scores = Vec::with_capacity(rows.len());
        let mut computed_entries = Vec::with_capacity(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            output.row_mut(i).copy_from_slice(&r.output);
            row_normalizers.push(r.normalizer);
            row_max_scores.push(r.max_score);
            computed_entries.push(r.keys.len());
        }
        Self {
            output,
            row_normalizers,
            row_max_scores,
            computed_entries,
        }
    }
}

/// One attended row: the keys used, their probabilities, and the output.
#[derive(Clone, Debug)]
pub(crate) struct RowAttention {
    pub keys: Vec<usize>,
    pub probs: Vec<f64>,
    pub output: Vec<f64>,
    pub normalizer: f64,
    pub max_score: f64,
}

impl RowAttention {
    /// Probabilities scattered into a causal row of length `len`.
    pub fn scatter(&self, len: usize) -> Vec<f64> {
        let mut row = vec![0.0; len];
        for (&j, &p) in self.keys.iter().zip(&self.probs) {
            row[j] = p;
        }
        row
    }
}

fn attend_keys(p: &AttentionProblem, scores: &[f64], keys: Vec<usize>) -> RowAttention {
    let selected: Vec<f64> = keys.iter().map(|&j| scores[j]).collect();
    let sm = softmax_dense(&selected);
    let mut output = vec![0.0; p.d()];
    for (&j, &w) in keys.iter().zip(&sm.probs) {
        for (o, &x) in output.iter_mut().zip(p.v.row(j)) {
            *o += w * x;
        }
    }
    RowAttention {
        keys,
        probs: sm.probs,
        output,
        normalizer: sm.normalizer,
        max_score: sm.max_score,
    }
}

pub(crate) fn dense_row(p: &AttentionProblem, i: usize) -> RowAttention {
    let scores = p.causal_scores(i);
    attend_keys(p, &scores, (0..=i).collect())
}

pub(crate) fn sparse_row(p: &AttentionProblem, pat: &SparsityPattern, i: usize) -> RowAttention {
    let scores = p.causal_scores(i);
    let keys = pat.select(i, &scores);
    attend_keys(p, &scores, keys)
}

pub fn dense_attention(p: &AttentionProblem) -> AttentionResult {
    let rows = (0..p.n()).into_par_iter().map(|i| dense_row(p, i)).collect();
    AttentionResult::from_rows(p.d(), rows)
}

pub fn sparse_attention(p: &AttentionProblem, pat: &SparsityPattern) -> Result<AttentionResult> {
    pat.validate(p.n())?;
    let rows = (0..p.n())
        .into_par_iter()
        .map(|i| sparse_row(p, pat, i))
        .collect();
    Ok(AttentionResult::from_rows(p.d(), rows))
}

/// Dense attention of one new token over a key/value cache plus itself.
pub fn decode_step(
    kv_k: &Matrix,
    kv_v: &Matrix,
    q_new: &[f64],
    k_new: &[f64],
    v_new: &[f64],
    scale: f64,
) -> Result<RowVector> {
    let d = q_new.len();
    if kv_k.rows() != kv_v.rows() {
        return Err(Error::dim("decode_step", kv_k.rows(), kv_v.rows()));
    }
    for len in [kv_k.cols(), kv_v.cols(), k_new.len(), v_new.len()] {
        if len != d {
            return Err(Error::dim("decode_step", d, len));
        }
    }
    let scores: Vec<f64> = kv_k
        .iter_rows()
        .chain(std::iter::once(k_new))
        .map(|k| scale * dot(q_new, k))
        .collect();
    let sm = softmax_dense(&scores);
    let mut out = vec![0.0; d];
    for (v, &w) in kv_v.iter_rows().chain(std::iter::once(v_new)).zip(&sm.probs) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    RowVector::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_problem;
    use proptest::prelude::*;

    fn oracle_dense_row(p: &AttentionProblem, i: usize) -> Vec<f64> {
        // plain exp-sum with no stabilization; scores are small here
        let mut z = 0.0;
        let mut acc = vec![0.0; p.d()];
        for j in 0..=i {
            let mut s = 0.0;
            for c in 0..p.d() {
                s += p.q().get(i, c) * p.k().get(j, c);
            }
            let e = (s * p.scale()).exp();
            z += e;
            for (a, &x) in acc.iter_mut().zip(p.v().row(j)) {
                *a += e * x;
            }
        }
        acc.iter().map(|x| x / z).collect()
    }

    #[test]
    fn single_row_returns_value() {
        let q = Matrix::new(1, 2, vec![0.4, -0.2]).unwrap();
        let k = Matrix::new(1, 2, vec![1.0, 3.0]).unwrap();
        let v = Matrix::new(1, 2, vec![5.0, -6.0]).unwrap();
        let p = AttentionProblem::new(q, k, v.clone()).unwrap();
        let r = dense_attention(&p);
        assert_eq!(r.output, v);
        assert_eq!(r.computed_entries, vec![1]);
    }

    #[test]
    fn zero_scores_average_values() {
        let n = 5;
        let q = Matrix::zeros(n, 3);
        let k = Matrix::new(n, 3, (0..n * 3).map(|x| x as f64).collect()).unwrap();
        let v = Matrix::new(n, 3, (0..n * 3).map(|x| (x * x) as f64 * 0.1).collect()).unwrap();
        let p = AttentionProblem::new(q, k, v.clone()).unwrap();
        let r = dense_attention(&p);
        for i in 0..n {
            for c in 0..3 {
                let mean: f64 = (0..=i).map(|j| v.get(j, c)).sum::<f64>() / (i + 1) as f64;
                assert!((r.output.get(i, c) - mean).abs() < 1e-12);
            }
            assert_eq!(r.row_normalizers[i], (i + 1) as f64);
        }
    }

    #[test]
    fn dense_matches_scalar_oracle() {
        let p = random_problem(8, 4, 11);
        let r = dense_attention(&p);
        for i in 0..8 {
            for (g, e) in r.output.row(i).iter().zip(oracle_dense_row(&p, i)) {
                assert!((g - e).abs() < 1e-12);
            }
            assert_eq!(r.computed_entries[i], i + 1);
        }
    }

    #[test]
    fn problem_validation() {
        let a = Matrix::zeros(3, 2);
        assert!(AttentionProblem::new(a.clone(), Matrix::zeros(3, 3), a.clone()).is_err());
        assert!(AttentionProblem::new(Matrix::zeros(0, 2), Matrix::zeros(0, 2), Matrix::zeros(0, 2)).is_err());
        assert!(AttentionProblem::with_scale(a.clone(), a.clone(), a, 0.0).is_err());
    }

    #[test]
    fn full_mask_and_wide_window_equal_dense() {
        let p = random_problem(12, 3, 5);
        let dense = dense_attention(&p);
        for pat in [
            SparsityPattern::Explicit(Mask::full_causal(12)),
            SparsityPattern::SinkWindow { sink: 0, window: 12 },
        ] {
            let s = sparse_attention(&p, &pat).unwrap();
            assert!(s.output.max_abs_diff(&dense.output).unwrap() <= 1e-12);
            assert_eq!(s.computed_entries, dense.computed_entries);
        }
    }

    #[test]
    fn sink_window_key_sets() {
        let pat = SparsityPattern::SinkWindow { sink: 2, window: 3 };
        assert_eq!(pat.select(0, &[]), vec![0]);
        assert_eq!(pat.select(3, &[]), vec![0, 1, 2, 3]);
        assert_eq!(pat.select(4, &[]), vec![0, 1, 2, 3, 4]);
        assert_eq!(pat.select(5, &[]), vec![0, 1, 3, 4, 5]);
        assert_eq!(pat.select(9, &[]), vec![0, 1, 7, 8, 9]);
        for i in 0..20 {
            assert_eq!(pat.row_count(i), pat.select(i, &[]).len());
        }
        let no_sink = SparsityPattern::SinkWindow { sink: 0, window: 1 };
        assert_eq!(no_sink.select(6, &[]), vec![6]);
    }

    #[test]
    fn top_k_prefers_recent_on_ties() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(top_k_indices(&[3.0, 1.0], 5), vec![0, 1]);
    }

    #[test]
    fn oracle_top_two_matches_sort_and_renormalize() {
        let p = random_problem(4, 2, 3);
        let r = sparse_attention(&p, &SparsityPattern::OracleTopK { k: 2 }).unwrap();
        for i in 0..4 {
            let mut scored: Vec<(f64, usize)> = (0..=i).map(|j| (p.score(i, j), j)).collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            scored.truncate(2);
            let z: f64 = scored.iter().map(|(s, _)| s.exp()).sum();
            for c in 0..2 {
                let e: f64 = scored.iter().map(|(s, j)| s.exp() / z * p.v().get(*j, c)).sum();
                assert!((r.output.get(i, c) - e).abs() < 1e-12);
            }
            assert_eq!(r.computed_entries[i], (i + 1).min(2));
        }
    }

    #[test]
    fn invalid_patterns() {
        let p = random_problem(3, 2, 1);
        let bad_window = SparsityPattern::SinkWindow { sink: 1, window: 0 };
        assert!(sparse_attention(&p, &bad_window).is_err());
        assert!(sparse_attention(&p, &SparsityPattern::OracleTopK { k: 0 }).is_err());
        let future = SparsityPattern::Explicit(Mask::from_fn(3, |i, j| j <= i || j == 2));
        assert!(sparse_attention(&p, &future).is_err());
        let empty_row = SparsityPattern::Explicit(Mask::from_fn(3, |i, j| j <= i && i != 1));
        assert!(sparse_attention(&p, &empty_row).is_err());
        let wrong_size = SparsityPattern::Explicit(Mask::full_causal(4));
        assert!(sparse_attention(&p, &wrong_size).is_err());
    }

    #[test]
    fn decode_empty_cache() {
        let out = decode_step(
            &Matrix::zeros(0, 2),
            &Matrix::zeros(0, 2),
            &[1.0, 2.0],
            &[0.5, 0.5],
            &[3.0, -4.0],
            1.0,
        )
        .unwrap();
        assert_eq!(&*out, &[3.0, -4.0]);
    }

    #[test]
    fn decode_uniform_two_keys() {
        let k = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let v = Matrix::new(1, 2, vec![2.0, 4.0]).unwrap();
        let out = decode_step(&k, &v, &[0.0, 1.0], &[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(&*out, &[1.0, 2.0]);
    }

    #[test]
    fn decode_dimension_errors() {
        let k = Matrix::zeros(2, 3);
        let v = Matrix::zeros(2, 2);
        assert!(decode_step(&k, &v, &[0.0; 3], &[0.0; 3], &[0.0; 3], 1.0).is_err());
        assert!(decode_step(&k, &Matrix::zeros(2, 3), &[0.0; 3], &[0.0; 2], &[0.0; 3], 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn causality_under_future_perturbation(
            seed in any::<u64>(), n in 2usize..24, sink in 0usize..4, window in 1usize..8, k in 1usize..6,
        ) {
            let p = random_problem(n, 3, seed);
            let cut = n / 2;
            let mut kd = p.k().data().to_vec();
            let mut vd = p.v().data().to_vec();
            for x in kd[(cut + 1) * 3..].iter_mut().chain(vd[(cut + 1) * 3..].iter_mut()) {
                *x = -3.0 * *x + 1.0;
            }
            let perturbed = AttentionProblem::new(
                p.q().clone(),
                Matrix::new(n, 3, kd).unwrap(),
                Matrix::new(n, 3, vd).unwrap(),
            ).unwrap();
            for pat in [
                SparsityPattern::SinkWindow { sink, window },
                SparsityPattern::OracleTopK { k },
                SparsityPattern::Explicit(Mask::full_causal(n)),
            ] {
                let a = sparse_attention(&p, &pat).unwrap();
                let b = sparse_attention(&perturbed, &pat).unwrap();
                for i in 0..=cut {
                    prop_assert_eq!(a.output.row(i), b.output.row(i));
                }
            }
        }

        #[test]
        fn rows_are_convex_combinations(seed in any::<u64>(), n in 1usize..24, sink in 0usize..4, window in 1usize..8) {
            let p = random_problem(n, 4, seed);
            let pat = SparsityPattern::SinkWindow { sink, window };
            let r = sparse_attention(&p, &pat).unwrap();
            for i in 0..n {
                let row = sparse_row(&p, &pat, i);
                prop_assert!((row.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for c in 0..4 {
                    let vals = row.keys.iter().map(|&j| p.v().get(j, c));
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    let x = r.output.get(i, c);
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn top_k_captures_proportional_mass(seed in any::<u64>(), n in 1usize..32, k in 1usize..10) {
            let p = random_problem(n, 3, seed);
            let dense = dense_attention(&p);
            let sparse = sparse_attention(&p, &SparsityPattern::OracleTopK { k }).unwrap();
            for i in 0..n {
                let share = (k.min(i + 1) as f64 / (i + 1) as f64).ln();
                prop_assert!(sparse.log_normalizer(i) >= share + dense.log_normalizer(i) - 1e-12);
            }
        }

        #[test]
        fn decode_matches_dense_last_row(seed in any::<u64>(), n in 1usize..16, d in 1usize..6) {
            let p = random_problem(n + 1, d, seed);
            let cache_k = Matrix::from_rows(d, &(0..n).map(|j| p.k().row(j)).collect::<Vec<_>>()).unwrap();
            let cache_v = Matrix::from_rows(d, &(0..n).map(|j| p.v().row(j)).collect::<Vec<_>>()).unwrap();
            let out = decode_step(&cache_k, &cache_v, p.q().row(n), p.k().row(n), p.v().row(n), p.scale()).unwrap();
            let dense = dense_attention(&p);
            for (a, b) in out.iter().zip(dense.output.row(n)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

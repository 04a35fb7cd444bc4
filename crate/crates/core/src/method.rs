//! The attention methods the harness compares, and the attention-weight rows
//! each one implicitly applies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{
    dense_attention, dense_row, sparse_attention, sparse_row, AttentionProblem, AttentionResult,
    SparsityPattern,
};
use crate::delta::{
    delta_attention, for_each_imputed, recompute_attention, select_query_rows, DeltaConfig,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Dense,
    Sparse {
        pattern: SparsityPattern,
    },
    Recompute {
        pattern: SparsityPattern,
        delta: DeltaConfig,
    },
    Delta {
        pattern: SparsityPattern,
        delta: DeltaConfig,
    },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Dense => write!(f, "dense"),
            Method::Sparse { pattern } => write!(f, "sparse/{pattern}"),
            Method::Recompute { pattern, delta } => {
                write!(f, "recompute/{pattern}/g{}", delta.gamma)
            }
            Method::Delta { pattern, delta } => write!(
                f,
                "delta-{}/{pattern}/g{}",
                delta.imputation,
                delta.gamma
            ),
        }
    }
}

/// Attention weights a method effectively places on the causal keys of one
/// query row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpliedRow {
    pub row: usize,
    /// Length `row + 1`.
    pub weights: Vec<f64>,
    /// Keys the method actually touched for this row.
    pub support: Vec<bool>,
}

impl Method {
    pub fn pattern(&self) -> Option<&SparsityPattern> {
        match self {
            Method::Dense => None,
            Method::Sparse { pattern }
            | Method::Recompute { pattern, .. }
            | Method::Delta { pattern, .. } => Some(pattern),
        }
    }

    pub fn run(&self, p: &AttentionProblem) -> Result<AttentionResult> {
        match self {
            Method::Dense => Ok(dense_attention(p)),
            Method::Sparse { pattern } => sparse_attention(p, pattern),
            Method::Recompute { pattern, delta } => recompute_attention(p, pattern, delta),
            Method::Delta { pattern, delta } => delta_attention(p, pattern, delta).map(|r| r.0),
        }
    }

    /// Score entries the method computes on an `n`-row problem, without
    /// touching any data.
    pub fn analytic_entries(&self, n: usize) -> Result<u64> {
        let full = |i: usize| (i + 1) as u64;
        match self {
            Method::Dense => Ok((n as u64) * (n as u64 + 1) / 2),
            Method::Sparse { pattern } => {
                pattern.validate(n)?;
                Ok((0..n).map(|i| pattern.row_count(i) as u64).sum())
            }
            Method::Recompute { pattern, delta } | Method::Delta { pattern, delta } => {
                pattern.validate(n)?;
                let sel = select_query_rows(n, delta)?;
                Ok((0..n)
                    .map(|i| {
                        if sel.is_dense_row(i) {
                            full(i)
                        } else {
                            pattern.row_count(i) as u64
                        }
                    })
                    .sum())
            }
        }
    }

    /// Implied attention rows for the ascending query indices `rows`.
    ///
    /// For the delta method a non-dense row is the sparse row plus the
    /// imputed difference of dense and sparse weights at the stride rows;
    /// multiplying it by V reproduces the method's output row. Weight that
    /// linear imputation borrows from keys after `row` is dropped.
    pub fn implied_rows(&self, p: &AttentionProblem, rows: &[usize]) -> Result<Vec<ImpliedRow>> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= p.n()) {
            return Err(Error::Index {
                index: bad,
                len: p.n(),
            });
        }
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("rows", "must be strictly increasing"));
        }
        let dense = |i: usize| ImpliedRow {
            row: i,
            weights: dense_row(p, i).scatter(i + 1),
            support: vec![true; i + 1],
        };
        let sparse = |pattern: &SparsityPattern, i: usize| {
            let r = sparse_row(p, pattern, i);
            let mut support = vec![false; i + 1];
            for &j in &r.keys {
                support[j] = true;
            }
            ImpliedRow {
                row: i,
                weights: r.scatter(i + 1),
                support,
            }
        };

        match self {
            Method::Dense => Ok(rows.iter().map(|&i| dense(i)).collect()),
            Method::Sparse { pattern } => {
                pattern.validate(p.n())?;
                Ok(rows.iter().map(|&i| sparse(pattern, i)).collect())
            }
            Method::Recompute { pattern, delta } => {
                pattern.validate(p.n())?;
                let sel = select_query_rows(p.n(), delta)?;
                Ok(rows
                    .iter()
                    .map(|&i| {
                        if sel.is_dense_row(i) {
                            dense(i)
                        } else {
                            sparse(pattern, i)
                        }
                    })
                    .collect())
            }
            Method::Delta { pattern, delta } => {
                pattern.validate(p.n())?;
                let sel = select_query_rows(p.n(), delta)?;
                let n = p.n();
                let mut weight_deltas = Matrix::zeros(sel.stride_rows.len(), n);
                for (slot, &j) in sel.stride_rows.iter().enumerate() {
                    let d = dense_row(p, j);
                    let s = sparse_row(p, pattern, j);
                    let row = weight_deltas.row_mut(slot);
                    for (&k, &w) in d.keys.iter().zip(&d.probs) {
                        row[k] += w;
                    }
                    for (&k, &w) in s.keys.iter().zip(&s.probs) {
                        row[k] -= w;
                    }
                }

                let mut out = Vec::with_capacity(rows.len());
                let mut wanted = rows.iter().peekable();
                let last = rows.last().map_or(0, |&r| r + 1);
                for_each_imputed(&sel, &weight_deltas, last, delta.imputation, |i, corr| {
                    if wanted.peek() != Some(&&i) {
                        return;
                    }
                    wanted.next();
                    if sel.is_dense_row(i) {
                        out.push(dense(i));
                        return;
                    }
                    let mut r = sparse(pattern, i);
                    for ((w, s), &c) in r.weights.iter_mut().zip(&mut r.support).zip(corr) {
                        *w += c;
                        *s |= c != 0.0;
                    }
                    out.push(r);
                });
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::Imputation;
    use crate::linalg::dot;
    use crate::testutil::random_problem;

    fn methods(gamma: usize) -> Vec<Method> {
        let pattern = SparsityPattern::SinkWindow { sink: 1, window: 3 };
        let mut out = vec![
            Method::Dense,
            Method::Sparse {
                pattern: pattern.clone(),
            },
            Method::Recompute {
                pattern: pattern.clone(),
                delta: DeltaConfig::new(gamma),
            },
        ];
        for imp in [
            Imputation::Repeat,
            Imputation::Ema { beta: 0.4 },
            Imputation::AbgFilter {
                alpha: 0.5,
                beta: 0.1,
                g: 0.01,
            },
        ] {
            out.push(Method::Delta {
                pattern: pattern.clone(),
                delta: DeltaConfig::new(gamma).with_imputation(imp),
            });
        }
        out
    }

    #[test]
    fn implied_rows_reproduce_outputs() {
        let p = random_problem(23, 3, 31);
        let rows: Vec<usize> = (0..23).collect();
        for m in methods(4) {
            let result = m.run(&p).unwrap();
            let implied = m.implied_rows(&p, &rows).unwrap();
            assert_eq!(implied.len(), 23);
            for r in implied {
                for c in 0..3 {
                    let col: Vec<f64> = (0..=r.row).map(|j| p.v().get(j, c)).collect();
                    let y = dot(&r.weights, &col);
                    assert!((y - result.output.get(r.row, c)).abs() < 1e-12, "{m} row {}", r.row);
                }
            }
        }
    }

    #[test]
    fn analytic_entries_match_runs() {
        let p = random_problem(37, 2, 3);
        for m in methods(5) {
            let r = m.run(&p).unwrap();
            assert_eq!(m.analytic_entries(37).unwrap(), r.total_entries(), "{m}");
        }
    }

    #[test]
    fn labels() {
        let m = methods(16);
        assert_eq!(m[0].to_string(), "dense");
        assert_eq!(m[1].to_string(), "sparse/sink_window(1,3)");
        assert_eq!(m[2].to_string(), "recompute/sink_window(1,3)/g16");
        assert_eq!(m[3].to_string(), "delta-repeat/sink_window(1,3)/g16");
    }

    #[test]
    fn implied_rows_validate_input() {
        let p = random_problem(5, 2, 3);
        assert!(Method::Dense.implied_rows(&p, &[5]).is_err());
        assert!(Method::Dense.implied_rows(&p, &[3, 2]).is_err());
    }
}

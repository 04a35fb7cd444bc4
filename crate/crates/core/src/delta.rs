//! Strided delta correction for sparse attention.
//!
//! Every `gamma`-th query row is attended densely. The difference between that
//! dense row and the sparse row at the same position is the row's delta, and
//! the delta is added to the sparse outputs of the rows that follow it until
//! the next stride row. A final block of `tail_dense` rows is always attended
//! densely so the corrected region has a length divisible by `gamma`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    dense_row, sparse_attention, AttentionProblem, AttentionResult, RowAttention, SparsityPattern,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// How stride-row deltas are expanded to every row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Imputation {
    /// Copy each delta to the rows of its stride segment.
    Repeat,
    /// Blend each delta toward the next stride row's delta across the segment.
    Linear,
    /// Repeat, then run `x_i = (1 - beta) x_{i-1} + beta y_i` over the rows.
    Ema { beta: f64 },
    /// Alpha-beta-gamma tracking filter over the repeated stream; `g` is the
    /// acceleration gain.
    AbgFilter { alpha: f64, beta: f64, g: f64 },
}

impl fmt::Display for Imputation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Imputation::Ema { beta } => write!(f, "ema({beta})"),
            Imputation::AbgFilter { alpha, beta, g } => write!(f, "abg({alpha},{beta},{g})"),
            _ => f.write_str(self.name()),
        }
    }
}

impl Imputation {
    pub fn name(&self) -> &'static str {
        match self {
            Imputation::Repeat => "repeat",
            Imputation::Linear => "linear",
            Imputation::Ema { .. } => "ema",
            Imputation::AbgFilter { .. } => "abg",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Imputation::Ema { beta } if !(beta > 0.0 && beta <= 1.0) => Err(Error::config(
                "delta.imputation.beta",
                format!("EMA coefficient must lie in (0, 1], got {beta}"),
            )),
            Imputation::AbgFilter { alpha, beta, g }
                if !(alpha.is_finite() && beta.is_finite() && g.is_finite()) =>
            {
                Err(Error::config(
                    "delta.imputation",
                    "filter coefficients must be finite",
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaConfig {
    pub gamma: usize,
    /// Rows at the end recomputed densely. `None` defers to [`DeltaConfig::tail_for`].
    #[serde(default)]
    pub tail_dense: Option<usize>,
    #[serde(default = "default_imputation")]
    pub imputation: Imputation,
}

fn default_imputation() -> Imputation {
    Imputation::Repeat
}

impl DeltaConfig {
    pub fn new(gamma: usize) -> Self {
        Self {
            gamma,
            tail_dense: None,
            imputation: Imputation::Repeat,
        }
    }

    pub fn with_tail(mut self, tail_dense: usize) -> Self {
        self.tail_dense = Some(tail_dense);
        self
    }

    pub fn with_imputation(mut self, imputation: Imputation) -> Self {
        self.imputation = imputation;
        self
    }

    /// Explicit tail, else `n mod gamma`; a context shorter than one stride
    /// gets no tail.
    pub fn tail_for(&self, n: usize) -> usize {
        self.tail_dense.unwrap_or_else(|| {
            let gamma = self.gamma.max(1);
            if n < gamma {
                0
            } else {
                n % gamma
            }
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::config("delta.gamma", "must be >= 1"));
        }
        let tail = self.tail_for(n);
        if tail >= n {
            return Err(Error::config(
                "delta.tail_dense",
                format!("tail block of {tail} rows leaves no corrected rows (N = {n})"),
            ));
        }
        self.imputation.validate()
    }
}

/// Which stride row (or the tail block) supplies a row's correction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Governor {
    /// Index into [`QuerySelection::stride_rows`].
    Stride(usize),
    Tail,
}

/// Rows attended densely: the stride rows `0, gamma, 2 gamma, ...` below
/// `tail_start`, and the tail block `tail_start..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySelection {
    pub n: usize,
    pub gamma: usize,
    pub stride_rows: Vec<usize>,
    pub tail_start: usize,
}

impl QuerySelection {
    pub fn tail_rows(&self) -> std::ops::Range<usize> {
        self.tail_start..self.n
    }

    pub fn governor(&self, i: usize) -> Governor {
        if i >= self.tail_start {
            Governor::Tail
        } else {
            Governor::Stride(i / self.gamma)
        }
    }

    pub fn is_dense_row(&self, i: usize) -> bool {
        i >= self.tail_start || i.is_multiple_of(self.gamma)
    }

    /// Stride rows followed by tail rows, all ascending.
    pub fn dense_rows(&self) -> Vec<usize> {
        self.stride_rows
            .iter()
            .copied()
            .chain(self.tail_rows())
            .collect()
    }
}

pub fn select_query_rows(n: usize, cfg: &DeltaConfig) -> Result<QuerySelection> {
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    cfg.validate(n)?;
    let tail_start = n - cfg.tail_for(n);
    Ok(QuerySelection {
        n,
        gamma: cfg.gamma,
        stride_rows: (0..tail_start).step_by(cfg.gamma).collect(),
        tail_start,
    })
}

/// Dense attention evaluated only on a subset of query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedResult {
    pub rows: Vec<usize>,
    pub output: Matrix,
    pub row_normalizers: Vec<f64>,
    pub row_max_scores: Vec<f64>,
    pub computed_entries: Vec<usize>,
}

pub fn strided_dense_rows(p: &AttentionProblem, rows: &[usize]) -> Result<RestrictedResult> {
    if let Some(&bad) = rows.iter().find(|&&i| i >= p.n()) {
        return Err(Error::Index {
            index: bad,
            len: p.n(),
        });
    }
    let attended: Vec<RowAttention> = rows.par_iter().map(|&i| dense_row(p, i)).collect();
    let r = AttentionResult::from_rows(p.d(), attended);
    Ok(RestrictedResult {
        rows: rows.to_vec(),
        output: r.output,
        row_normalizers: r.row_normalizers,
        row_max_scores: r.row_max_scores,
        computed_entries: r.computed_entries,
    })
}

/// Intermediate state of a delta run.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTrace {
    pub selection: QuerySelection,
    /// `dense - sparse` at each stride row, one row per stride row.
    pub deltas: Matrix,
    pub dense_rows: RestrictedResult,
    pub tail: RestrictedResult,
}

impl DeltaTrace {
    pub fn selected_rows(&self) -> &[usize] {
        &self.selection.stride_rows
    }
}

struct Prepared {
    selection: QuerySelection,
    sparse: AttentionResult,
    stride: RestrictedResult,
    tail: RestrictedResult,
}

fn prepare(p: &AttentionProblem, pat: &SparsityPattern, cfg: &DeltaConfig) -> Result<Prepared> {
    let selection = select_query_rows(p.n(), cfg)?;
    let sparse = sparse_attention(p, pat)?;
    let stride = strided_dense_rows(p, &selection.stride_rows)?;
    let tail_rows: Vec<usize> = selection.tail_rows().collect();
    let tail = strided_dense_rows(p, &tail_rows)?;
    Ok(Prepared {
        selection,
        sparse,
        stride,
        tail,
    })
}

/// Replaces stride and tail rows of the sparse result with their dense rows.
fn swap_in_dense(prep: &Prepared) -> AttentionResult {
    let mut out = prep.sparse.clone();
    for dense in [&prep.stride, &prep.tail] {
        for (slot, &i) in dense.rows.iter().enumerate() {
            out.output.row_mut(i).copy_from_slice(dense.output.row(slot));
            out.row_normalizers[i] = dense.row_normalizers[slot];
            out.row_max_scores[i] = dense.row_max_scores[slot];
            out.computed_entries[i] = dense.computed_entries[slot];
        }
    }
    out
}

pub fn delta_attention(
    p: &AttentionProblem,
    pat: &SparsityPattern,
    cfg: &DeltaConfig,
) -> Result<(AttentionResult, DeltaTrace)> {
    let prep = prepare(p, pat, cfg)?;
    let d = p.d();

    let mut deltas = Matrix::zeros(prep.selection.stride_rows.len(), d);
    for (slot, &j) in prep.selection.stride_rows.iter().enumerate() {
        let sparse_row = prep.sparse.output.row(j);
        for ((o, &a), &b) in deltas
            .row_mut(slot)
            .iter_mut()
            .zip(prep.stride.output.row(slot))
            .zip(sparse_row)
        {
            *o = a - b;
        }
    }
    let corrections = impute_rows(&prep.selection, &deltas, prep.selection.n, cfg.imputation);

    let mut out = swap_in_dense(&prep);
    for i in 0..prep.selection.n {
        if prep.selection.is_dense_row(i) {
            continue;
        }
        for (o, &c) in out.output.row_mut(i).iter_mut().zip(corrections.row(i)) {
            *o += c;
        }
    }

    let trace = DeltaTrace {
        selection: prep.selection,
        deltas,
        dense_rows: prep.stride,
        tail: prep.tail,
    };
    Ok((out, trace))
}

/// Sparse attention with stride and tail rows swapped for dense rows and no
/// correction propagated to the other rows.
pub fn recompute_attention(
    p: &AttentionProblem,
    pat: &SparsityPattern,
    cfg: &DeltaConfig,
) -> Result<AttentionResult> {
    let prep = prepare(p, pat, cfg)?;
    Ok(swap_in_dense(&prep))
}

/// Expands the trace's stride-row deltas into one correction row per row
/// `0..n`.
pub fn impute_deltas(trace: &DeltaTrace, n: usize, cfg: &DeltaConfig) -> Result<Matrix> {
    if trace.deltas.rows() == 0 {
        return Err(Error::dim("impute_deltas", "at least one delta row", 0));
    }
    if trace.deltas.rows() != trace.selection.stride_rows.len() {
        return Err(Error::dim(
            "impute_deltas",
            trace.selection.stride_rows.len(),
            trace.deltas.rows(),
        ));
    }
    Ok(impute_rows(&trace.selection, &trace.deltas, n, cfg.imputation))
}

/// `deltas` holds one row per stride row of `sel`; the width is arbitrary so
/// the same expansion serves output deltas and attention-weight deltas.
pub(crate) fn impute_rows(
    sel: &QuerySelection,
    deltas: &Matrix,
    n: usize,
    mode: Imputation,
) -> Matrix {
    let mut out = Matrix::zeros(n, deltas.cols());
    for_each_imputed(sel, deltas, n, mode, |i, row| out.row_mut(i).copy_from_slice(row));
    out
}

/// Streams the imputed correction of rows `0..n` in order. EMA and the
/// filter carry state from row to row, so rows are never skipped.
pub(crate) fn for_each_imputed(
    sel: &QuerySelection,
    deltas: &Matrix,
    n: usize,
    mode: Imputation,
    mut emit: impl FnMut(usize, &[f64]),
) {
    if n == 0 {
        return;
    }
    let width = deltas.cols();
    let last = sel.stride_rows.len() - 1;
    let slot_of = |i: usize| (i / sel.gamma).min(last);

    match mode {
        Imputation::Repeat => {
            for i in 0..n {
                emit(i, deltas.row(slot_of(i)));
            }
        }
        Imputation::Linear => {
            let mut row = vec![0.0; width];
            for i in 0..n {
                let slot = slot_of(i);
                if slot == last {
                    emit(i, deltas.row(slot));
                    continue;
                }
                let beta = (i - sel.stride_rows[slot]) as f64 / sel.gamma as f64;
                for ((o, &a), &b) in row
                    .iter_mut()
                    .zip(deltas.row(slot))
                    .zip(deltas.row(slot + 1))
                {
                    *o = (1.0 - beta) * a + beta * b;
                }
                emit(i, &row);
            }
        }
        Imputation::Ema { beta } => {
            let mut state = deltas.row(0).to_vec();
            emit(0, &state);
            for i in 1..n {
                for (s, &y) in state.iter_mut().zip(deltas.row(slot_of(i))) {
                    *s = (1.0 - beta) * *s + beta * y;
                }
                emit(i, &state);
            }
        }
        Imputation::AbgFilter { alpha, beta, g } => {
            let mut pos = deltas.row(0).to_vec();
            let mut vel = vec![0.0; width];
            let mut acc = vec![0.0; width];
            emit(0, &pos);
            for i in 1..n {
                let y = deltas.row(slot_of(i));
                for c in 0..width {
                    let p_hat = pos[c] + vel[c] + 0.5 * acc[c];
                    let v_hat = vel[c] + acc[c];
                    let r = y[c] - p_hat;
                    pos[c] = p_hat + alpha * r;
                    vel[c] = v_hat + beta * r;
                    acc[c] += g * r;
                }
                emit(i, &pos);
            }
        }
    }
}

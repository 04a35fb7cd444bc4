//! Remainder decomposition of the sparse/dense output difference and its
//! head-mass bound.
//!
//! For one attention row and one value column, with selected (tail) keys `S`:
//!
//! ```text
//! delta = a.v - a*.v = sum_{j not in S} a_j v_j + R
//! R     = -(H / (H + T)) * sum_{j in S} a*_j v_j
//! |R|  <= (H / (H + T)) * max_{j in S} |v_j|
//! ```
//!
//! where `H` and `T` are the exponential score mass of the unselected and
//! selected keys.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionProblem, SparsityPattern};
use crate::error::{Error, Result};

/// Tolerance used when checking the closed form of the remainder.
pub const CLOSED_FORM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub row: usize,
    pub value_col: usize,
    /// Unselected exponential mass, stabilized by the row max.
    pub head_sum: f64,
    /// Selected exponential mass, same stabilizer as `head_sum`.
    pub tail_sum: f64,
    pub tail_max: f64,
    pub delta: f64,
    pub head_contribution: f64,
    pub remainder: f64,
    pub closed_form_remainder: f64,
    pub bound: f64,
    /// `|delta - head_contribution|`, the error of reading delta as the
    /// missing contribution.
    pub empirical_delta_error: f64,
    /// True when every selected score is >= every unselected score, i.e. the
    /// selected set is a literal top-k of the row.
    pub selection_is_top_k: bool,
}

impl BoundRecord {
    pub fn head_ratio(&self) -> f64 {
        self.head_sum / (self.head_sum + self.tail_sum)
    }

    pub fn closed_form_holds(&self) -> bool {
        (self.remainder - self.closed_form_remainder).abs() <= CLOSED_FORM_TOL
    }

    pub fn bound_holds(&self) -> bool {
        self.remainder.abs() <= self.bound + 1e-12
    }
}

struct RowMass {
    selected: Vec<bool>,
    weights: Vec<f64>,
    head_sum: f64,
    tail_sum: f64,
    is_top_k: bool,
}

fn row_mass(p: &AttentionProblem, pat: &SparsityPattern, row: usize) -> RowMass {
    let scores = p.causal_scores(row);
    let mut selected = vec![false; row + 1];
    for j in pat.select(row, &scores) {
        selected[j] = true;
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let (mut head_sum, mut tail_sum) = (0.0, 0.0);
    let (mut min_sel, mut max_unsel) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((&w, &s), &sel) in weights.iter().zip(&scores).zip(&selected) {
        if sel {
            tail_sum += w;
            min_sel = min_sel.min(s);
        } else {
            head_sum += w;
            max_unsel = max_unsel.max(s);
        }
    }
    RowMass {
        selected,
        weights,
        head_sum,
        tail_sum,
        is_top_k: min_sel >= max_unsel,
    }
}

fn decompose_column(p: &AttentionProblem, mass: &RowMass, row: usize, col: usize) -> BoundRecord {
    let z = mass.head_sum + mass.tail_sum;
    let (mut dense_dot, mut sparse_dot, mut head_contribution) = (0.0, 0.0, 0.0);
    let mut tail_max: f64 = 0.0;
    for (j, (&w, &sel)) in mass.weights.iter().zip(&mass.selected).enumerate() {
        let v = p.v().get(j, col);
        let a = w / z;
        dense_dot += a * v;
        if sel {
            sparse_dot += w / mass.tail_sum * v;
            tail_max = tail_max.max(v.abs());
        } else {
            head_contribution += a * v;
        }
    }
    let delta = dense_dot - sparse_dot;
    let remainder = delta - head_contribution;
    let ratio = mass.head_sum / z;
    BoundRecord {
        row,
        value_col: col,
        head_sum: mass.head_sum,
        tail_sum: mass.tail_sum,
        tail_max,
        delta,
        head_contribution,
        remainder,
        closed_form_remainder: -ratio * sparse_dot,
        bound: ratio * tail_max,
        empirical_delta_error: remainder.abs(),
        selection_is_top_k: mass.is_top_k,
    }
}

fn check_row(p: &AttentionProblem, pat: &SparsityPattern, row: usize) -> Result<()> {
    if row >= p.n() {
        return Err(Error::Index {
            index: row,
            len: p.n(),
        });
    }
    pat.validate(p.n())
}

pub fn lemma_decompose(
    p: &AttentionProblem,
    pat: &SparsityPattern,
    row: usize,
    value_col: usize,
) -> Result<BoundRecord> {
    check_row(p, pat, row)?;
    if value_col >= p.d() {
        return Err(Error::Index {
            index: value_col,
            len: p.d(),
        });
    }
    let mass = row_mass(p, pat, row);
    Ok(decompose_column(p, &mass, row, value_col))
}

/// One row of a sweep, collapsed over value columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowBound {
    pub row: usize,
    pub head_sum: f64,
    pub tail_sum: f64,
    pub tail_max: f64,
    /// Remainder of the column with the largest `|R|`.
    pub remainder: f64,
    pub bound: f64,
    pub head_contribution: f64,
    pub empirical_delta_error: f64,
    pub selection_is_top_k: bool,
    pub closed_form_ok: bool,
    pub bound_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternBound {
    pub pattern: String,
    pub rows: Vec<RowBound>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<BoundRecord>,
    pub mean_bound: f64,
    pub mean_empirical_error: f64,
    pub satisfied_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub patterns: Vec<PatternBound>,
}

fn collapse(records: &[BoundRecord]) -> RowBound {
    let worst = records
        .iter()
        .max_by(|a, b| a.remainder.abs().total_cmp(&b.remainder.abs()))
        .expect("at least one value column");
    RowBound {
        row: worst.row,
        head_sum: worst.head_sum,
        tail_sum: worst.tail_sum,
        tail_max: records.iter().map(|r| r.tail_max).fold(0.0, f64::max),
        remainder: worst.remainder,
        bound: records.iter().map(|r| r.bound).fold(0.0, f64::max),
        head_contribution: worst.head_contribution,
        empirical_delta_error: worst.empirical_delta_error,
        selection_is_top_k: worst.selection_is_top_k,
        closed_form_ok: records.iter().all(BoundRecord::closed_form_holds),
        bound_ok: records.iter().all(BoundRecord::bound_holds),
    }
}

/// Runs the decomposition for every pattern, row and value column.
/// `keep_columns` retains the per-column records.
pub fn bound_sweep(
    p: &AttentionProblem,
    patterns: &[SparsityPattern],
    rows: &[usize],
    keep_columns: bool,
) -> Result<BoundReport> {
    if rows.is_empty() {
        return Err(Error::config("rows", "bound sweep needs at least one row"));
    }
    let mut out = Vec::with_capacity(patterns.len());
    for pat in patterns {
        for &row in rows {
            check_row(p, pat, row)?;
        }
        let per_row: Vec<Vec<BoundRecord>> = rows
            .par_iter()
            .map(|&row| {
                let mass = row_mass(p, pat, row);
                (0..p.d())
                    .map(|c| decompose_column(p, &mass, row, c))
                    .collect()
            })
            .collect();
        let collapsed: Vec<RowBound> = per_row.iter().map(|r| collapse(r)).collect();
        let count = collapsed.len() as f64;
        out.push(PatternBound {
            pattern: pat.to_string(),
            mean_bound: collapsed.iter().map(|r| r.bound).sum::<f64>() / count,
            mean_empirical_error: collapsed
                .iter()
                .map(|r| r.empirical_delta_error)
                .sum::<f64>()
                / count,
            satisfied_fraction: collapsed.iter().filter(|r| r.bound_ok).count() as f64 / count,
            rows: collapsed,
            columns: if keep_columns {
                per_row.into_iter().flatten().collect()
            } else {
                Vec::new()
            },
        });
    }
    Ok(BoundReport { patterns: out })
}

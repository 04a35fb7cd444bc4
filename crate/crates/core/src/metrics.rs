//! Diagnostics: output cosine similarity and rank correlation against dense
//! attention, locality of the missing-contribution vectors, and entry-count
//! cost accounting.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention, sparse_attention, AttentionProblem, AttentionResult, SparsityPattern};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot};
use crate::method::Method;

static DEGENERATE_RANKS: AtomicU64 = AtomicU64::new(0);

/// Number of `spearman_rho` calls with a constant argument since process start.
pub fn degenerate_rank_count() -> u64 {
    DEGENERATE_RANKS.load(Ordering::Relaxed)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let dy: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx = dot(&dx, &dx);
    let syy = dot(&dy, &dy);
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((dot(&dx, &dy) / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with average ranks for ties. A constant argument gives 0.0
/// and bumps [`degenerate_rank_count`].
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("spearman_rho", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::dim("spearman_rho", "length >= 2", a.len()));
    }
    match pearson(&average_ranks(a), &average_ranks(b)) {
        Some(rho) => Ok(rho),
        None => {
            DEGENERATE_RANKS.fetch_add(1, Ordering::Relaxed);
            Ok(0.0)
        }
    }
}

/// Linear-interpolated quantile of already sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: quantile_sorted(&sorted, 0.5),
            p10: quantile_sorted(&sorted, 0.1),
            p90: quantile_sorted(&sorted, 0.9),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankOptions {
    /// Rank only the keys the method touched instead of treating the rest as
    /// tied zeros.
    #[serde(default)]
    pub exclude_unsupported: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    /// Cosine of each output row against the dense output row.
    pub cosines: Vec<f64>,
    /// Query rows whose attention rows were rank-correlated.
    pub suffix_rows: Vec<usize>,
    pub rhos: Vec<f64>,
    pub cosine_summary: Summary,
    pub rho_summary: Summary,
}

pub fn compare_methods(
    p: &AttentionProblem,
    method: &Method,
    method_out: &AttentionResult,
    suffix_len: usize,
    opts: RankOptions,
) -> Result<MethodComparison> {
    compare_with_reference(p, &dense_attention(p), method, method_out, suffix_len, opts)
}

/// [`compare_methods`] with a precomputed dense result.
pub fn compare_with_reference(
    p: &AttentionProblem,
    dense: &AttentionResult,
    method: &Method,
    method_out: &AttentionResult,
    suffix_len: usize,
    opts: RankOptions,
) -> Result<MethodComparison> {
    let n = p.n();
    if suffix_len > n {
        return Err(Error::config(
            "suffix_len",
            format!("{suffix_len} exceeds N = {n}"),
        ));
    }
    if method_out.output.rows() != n || method_out.output.cols() != p.d() {
        return Err(Error::dim(
            "compare_methods",
            format!("{n}x{}", p.d()),
            format!("{}x{}", method_out.output.rows(), method_out.output.cols()),
        ));
    }
    let cosines = (0..n)
        .into_par_iter()
        .map(|i| cosine(method_out.output.row(i), dense.output.row(i)))
        .collect::<Result<Vec<f64>>>()?;

    let suffix_rows: Vec<usize> = (n - suffix_len..n).collect();
    let implied = method.implied_rows(p, &suffix_rows)?;
    let reference = Method::Dense.implied_rows(p, &suffix_rows)?;
    let rhos = implied
        .par_iter()
        .zip(&reference)
        .map(|(m, d)| {
            if m.weights.len() < 2 {
                // a single causal key ranks identically under every method
                return Ok(1.0);
            }
            if opts.exclude_unsupported {
                let (a, b): (Vec<f64>, Vec<f64>) = m
                    .weights
                    .iter()
                    .zip(&d.weights)
                    .zip(&m.support)
                    .filter(|(_, &s)| s)
                    .map(|((&x, &y), _)| (x, y))
                    .unzip();
                if a.len() < 2 {
                    return Ok(1.0);
                }
                spearman_rho(&a, &b)
            } else {
                spearman_rho(&m.weights, &d.weights)
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(MethodComparison {
        cosine_summary: Summary::of(&cosines),
        rho_summary: Summary::of(&rhos),
        cosines,
        suffix_rows,
        rhos,
    })
}

/// Rows whose missing-contribution vector is at most this long are treated
/// as zero by [`delta_locality`].
pub const ZERO_DELTA_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityPoint {
    pub offset: usize,
    /// Mean cosine over row pairs where both vectors are nonzero; `None` when
    /// no such pair exists.
    pub mean_cosine: Option<f64>,
    pub pairs: usize,
    pub skipped_zero_pairs: usize,
}

/// Mean cosine between `dense - sparse` output rows `i` and `i + offset`, for
/// offsets `0..=max_offset`.
pub fn delta_locality(
    p: &AttentionProblem,
    pat: &SparsityPattern,
    max_offset: usize,
) -> Result<Vec<LocalityPoint>> {
    let n = p.n();
    if max_offset >= n {
        return Err(Error::config(
            "gamma_max",
            format!("{max_offset} must be below N = {n}"),
        ));
    }
    let dense = dense_attention(p);
    let sparse = sparse_attention(p, pat)?;
    let diffs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            dense
                .output
                .row(i)
                .iter()
                .zip(sparse.output.row(i))
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let nonzero: Vec<bool> = diffs
        .iter()
        .map(|d| dot(d, d).sqrt() > ZERO_DELTA_NORM)
        .collect();

    (0..=max_offset)
        .into_par_iter()
        .map(|offset| {
            let mut sum = 0.0;
            let mut pairs = 0;
            let mut skipped = 0;
            for i in 0..n - offset {
                if nonzero[i] && nonzero[i + offset] {
                    sum += cosine(&diffs[i], &diffs[i + offset])?;
                    pairs += 1;
                } else {
                    skipped += 1;
                }
            }
            Ok(LocalityPoint {
                offset,
                mean_cosine: (pairs > 0).then(|| sum / pairs as f64),
                pairs,
                skipped_zero_pairs: skipped,
            })
        })
        .collect()
}

/// Entry counts of a method against dense causal attention. Score and
/// weighted-value FLOPs both scale with the entry count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostAccount {
    pub n: usize,
    pub dense_entries: u64,
    pub method_entries: u64,
    pub sparsity: f64,
    pub flop_ratio_vs_dense: f64,
    /// Entries spent on densely attended rows, if the method has any.
    #[serde(default)]
    pub dense_row_entries: u64,
}

impl CostAccount {
    pub fn from_entries(n: usize, method_entries: u64, dense_row_entries: u64) -> Self {
        let dense_entries = n as u64 * (n as u64 + 1) / 2;
        let ratio = method_entries as f64 / dense_entries as f64;
        Self {
            n,
            dense_entries,
            method_entries,
            sparsity: 1.0 - ratio,
            flop_ratio_vs_dense: ratio,
            dense_row_entries,
        }
    }

    /// Sparsity counting only the densely attended rows, i.e. the extra
    /// work the strided correction adds on top of its sparse base.
    pub fn dense_row_sparsity(&self) -> f64 {
        1.0 - self.dense_row_entries as f64 / self.dense_entries as f64
    }

    /// `dense_entries / method_entries`.
    pub fn speedup_bound(&self) -> f64 {
        self.dense_entries as f64 / self.method_entries as f64
    }
}

pub fn cost_account(result: &AttentionResult, n: usize) -> CostAccount {
    CostAccount::from_entries(n, result.total_entries(), 0)
}

/// Cost of `method` on an `n`-row problem from entry counts alone.
pub fn analytic_cost(method: &Method, n: usize) -> Result<CostAccount> {
    let entries = method.analytic_entries(n)?;
    let dense_rows = match method {
        Method::Recompute { delta, .. } | Method::Delta { delta, .. } => {
            let sel = crate::delta::select_query_rows(n, delta)?;
            sel.dense_rows().iter().map(|&i| i as u64 + 1).sum()
        }
        _ => 0,
    };
    Ok(CostAccount::from_entries(n, entries, dense_rows))
}

/// Keys per row that sparse attention with `window` would need to match the
/// cost of a `window`-wide strided-corrected run over `context` tokens.
pub fn approx_window_size(context: usize, window: usize, gamma: usize) -> Result<usize> {
    if gamma == 0 {
        return Err(Error::config("gamma", "must be >= 1"));
    }
    Ok(window + context / (2 * gamma))
}

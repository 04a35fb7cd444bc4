use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention, AttentionResult, SparsityPattern};
use crate::bound::{bound_sweep, BoundReport};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, PatternSpec, RunMode};
use crate::harness::workload::generate_workload;
use crate::linalg::cosine;
use crate::method::Method;
use crate::metrics::{analytic_cost, compare_with_reference, CostAccount, MethodComparison};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub comparison: MethodComparison,
    pub cost: CostAccount,
    /// Cosine of the last output row against the planted target value.
    pub needle_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: usize,
    pub needle_position: Option<usize>,
    pub methods: Vec<MethodReport>,
    pub bound: Option<BoundReport>,
}

/// Per-method figures averaged over heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub cost: CostAccount,
    pub mean_cosine: Option<f64>,
    pub median_cosine: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub median_spearman: Option<f64>,
    pub mean_needle_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub head: usize,
    pub method: String,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub methods: Vec<String>,
    pub summary: Vec<MethodSummary>,
    pub heads: Vec<HeadReport>,
    pub timings: Vec<Timing>,
}

fn elapsed_ms(start: Instant, deterministic: bool) -> f64 {
    if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64() * 1e3
    }
}

fn method_cost(method: &Method, result: &AttentionResult, n: usize) -> Result<CostAccount> {
    let analytic = analytic_cost(method, n)?;
    let counted = result.total_entries();
    if counted != analytic.method_entries {
        return Err(Error::dim(
            "method_cost",
            format!("{} analytic entries", analytic.method_entries),
            counted,
        ));
    }
    Ok(analytic)
}

fn run_head(
    cfg: &ExperimentConfig,
    methods: &[Method],
    head: usize,
) -> Result<(HeadReport, Vec<Timing>)> {
    let workload = generate_workload(cfg, head)?;
    let p = &workload.problem;
    let dense = dense_attention(p);
    let mut reports = Vec::with_capacity(methods.len());
    let mut timings = Vec::with_capacity(methods.len());
    for m in methods {
        let start = Instant::now();
        let out = m.run(p)?;
        timings.push(Timing {
            head,
            method: m.to_string(),
            millis: elapsed_ms(start, cfg.deterministic),
        });
        let comparison = compare_with_reference(p, &dense, m, &out, cfg.suffix_len(), cfg.rank)?;
        let needle_score = match &workload.needle {
            Some(truth) => Some(cosine(out.output.row(p.n() - 1), &truth.value)?),
            None => None,
        };
        reports.push(MethodReport {
            method: m.to_string(),
            comparison,
            cost: method_cost(m, &out, p.n())?,
            needle_score,
        });
    }

    let bound = match &cfg.bound {
        Some(spec) => {
            let rows: Vec<usize> = match &spec.rows {
                Some(rows) => rows.clone(),
                None => (cfg.n - cfg.suffix_len()..cfg.n).collect(),
            };
            let patterns: Vec<SparsityPattern> =
                cfg.patterns.iter().map(|p| p.resolve(cfg.n)).collect();
            Some(bound_sweep(p, &patterns, &rows, spec.keep_columns)?)
        }
        None => None,
    };

    Ok((
        HeadReport {
            head,
            needle_position: workload.needle.map(|t| t.target_position),
            methods: reports,
            bound,
        },
        timings,
    ))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn summarize(methods: &[Method], heads: &[HeadReport], n: usize) -> Result<Vec<MethodSummary>> {
    methods
        .iter()
        .enumerate()
        .map(|(slot, m)| {
            let per_head: Vec<&MethodReport> = heads.iter().map(|h| &h.methods[slot]).collect();
            let cost = match per_head.first() {
                Some(r) => r.cost.clone(),
                None => analytic_cost(m, n)?,
            };
            let all_cos = || per_head.iter().flat_map(|r| r.comparison.cosines.iter().copied());
            let all_rho = || per_head.iter().flat_map(|r| r.comparison.rhos.iter().copied());
            Ok(MethodSummary {
                method: m.to_string(),
                cost,
                mean_cosine: mean(all_cos()),
                median_cosine: mean(per_head.iter().map(|r| r.comparison.cosine_summary.median)),
                mean_spearman: mean(all_rho()),
                median_spearman: mean(per_head.iter().map(|r| r.comparison.rho_summary.median)),
                mean_needle_score: mean(per_head.iter().filter_map(|r| r.needle_score)),
            })
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let methods = cfg.resolve_methods();
    let labels: Vec<String> = methods.iter().map(|m| m.to_string()).collect();

    if cfg.mode == RunMode::AccountingOnly {
        let summary = methods
            .iter()
            .map(|m| {
                Ok(MethodSummary {
                    method: m.to_string(),
                    cost: analytic_cost(m, cfg.n)?,
                    mean_cosine: None,
                    median_cosine: None,
                    mean_spearman: None,
                    median_spearman: None,
                    mean_needle_score: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(RunReport {
            config: cfg.clone(),
            methods: labels,
            summary,
            heads: Vec::new(),
            timings: Vec::new(),
        });
    }

    let per_head = (0..cfg.heads)
        .into_par_iter()
        .map(|h| run_head(cfg, &methods, h))
        .collect::<Result<Vec<_>>>()?;
    let (heads, timings): (Vec<HeadReport>, Vec<Vec<Timing>>) = per_head.into_iter().unzip();
    Ok(RunReport {
        config: cfg.clone(),
        summary: summarize(&methods, &heads, cfg.n)?,
        methods: labels,
        heads,
        timings: timings.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub entries: u64,
    /// Dense entries over this method's entries.
    pub entry_ratio_vs_dense: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

/// Wall-clock medians on head 0 of the configured workload.
pub fn bench(cfg: &ExperimentConfig, repeats: usize) -> Result<BenchTable> {
    if repeats < 3 {
        return Err(Error::config("repeats", "must be >= 3"));
    }
    cfg.validate()?;
    let p = generate_workload(cfg, 0)?.problem;
    let mut rows = Vec::new();
    for m in cfg.resolve_methods() {
        let mut times = Vec::with_capacity(repeats);
        let mut entries = 0;
        for _ in 0..repeats {
            let start = Instant::now();
            let out = m.run(&p)?;
            times.push(elapsed_ms(start, cfg.deterministic));
            entries = out.total_entries();
        }
        times.sort_by(f64::total_cmp);
        let acct = CostAccount::from_entries(cfg.n, entries, 0);
        rows.push(BenchRow {
            method: m.to_string(),
            median_ms: times[repeats / 2],
            min_ms: times[0],
            entries,
            entry_ratio_vs_dense: acct.speedup_bound(),
        });
    }
    Ok(BenchTable {
        n: cfg.n,
        d: cfg.d,
        repeats,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: usize,
    pub window: usize,
    pub method: String,
    pub mean_cosine: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub mean_needle_score: Option<f64>,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
}

/// Runs the experiment for every `(gamma, window)` pair. The sweep uses a
/// single sink-window pattern whose sink size comes from the first
/// configured sink-window pattern (4 if there is none).
pub fn sweep(cfg: &ExperimentConfig, gammas: &[usize], windows: &[usize]) -> Result<SweepReport> {
    if gammas.is_empty() || windows.is_empty() {
        return Err(Error::config("sweep", "gamma and window lists must be non-empty"));
    }
    let sink = cfg
        .patterns
        .iter()
        .find_map(|p| match p {
            PatternSpec::SinkWindow { sink, .. } => Some(*sink),
            _ => None,
        })
        .unwrap_or(4);
    let mut rows = Vec::new();
    for &gamma in gammas {
        for &window in windows {
            let mut c = cfg.clone();
            c.delta.gamma = gamma;
            c.patterns = vec![PatternSpec::SinkWindow { sink, window }];
            c.bound = None;
            let report = run_experiment(&c).map_err(|e| match e {
                Error::Config { field, reason } => Error::config(
                    format!("sweep[gamma={gamma},window={window}].{field}"),
                    reason,
                ),
                other => other,
            })?;
            rows.extend(report.summary.into_iter().map(|s| SweepRow {
                gamma,
                window,
                method: s.method,
                mean_cosine: s.mean_cosine,
                mean_spearman: s.mean_spearman,
                mean_needle_score: s.mean_needle_score,
                sparsity: s.cost.sparsity,
            }));
        }
    }
    Ok(SweepReport {
        config: cfg.clone(),
        rows,
    })
}

//! Experiment configuration, read from JSON. See `docs/config.md` for the
//! schema.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{Mask, SparsityPattern};
use crate::delta::{DeltaConfig, Imputation};
use crate::error::{Error, Result};
use crate::metrics::RankOptions;
use crate::method::Method;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorPaths {
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSpec {
    #[default]
    Gaussian,
    Needle {
        num_pairs: usize,
        signal_strength: f64,
    },
    /// Q/K/V tensor files, one triple per head.
    External { heads: Vec<TensorPaths> },
}

/// Pattern as written in a config; resolved against `n` at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternSpec {
    SinkWindow { sink: usize, window: usize },
    OracleTopK { k: usize },
    FullCausal,
}

impl PatternSpec {
    pub fn resolve(&self, n: usize) -> SparsityPattern {
        match *self {
            PatternSpec::SinkWindow { sink, window } => SparsityPattern::SinkWindow { sink, window },
            PatternSpec::OracleTopK { k } => SparsityPattern::OracleTopK { k },
            PatternSpec::FullCausal => SparsityPattern::Explicit(Mask::full_causal(n)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Dense,
    Sparse,
    Recompute,
    /// Uses `delta.imputation` unless overridden here.
    Delta {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        imputation: Option<Imputation>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Full,
    /// Entry counts only; no tensors are generated.
    AccountingOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Json,
    Csv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    /// Rows to analyse; defaults to the comparison suffix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<usize>>,
    #[serde(default)]
    pub keep_columns: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub workload: WorkloadSpec,
    pub patterns: Vec<PatternSpec>,
    pub methods: Vec<MethodSpec>,
    pub delta: DeltaConfig,
    /// Query rows at the end whose attention rows are rank-correlated.
    /// `None` means `min(128, n)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suffix_len: Option<usize>,
    pub rank: RankOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSpec>,
    pub mode: RunMode,
    pub outputs: Vec<ReportKind>,
    /// Zero all wall-clock timings so reports are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 1024,
            d: 64,
            heads: 4,
            workload: WorkloadSpec::Gaussian,
            patterns: vec![PatternSpec::SinkWindow { sink: 4, window: 64 }],
            methods: vec![
                MethodSpec::Dense,
                MethodSpec::Sparse,
                MethodSpec::Recompute,
                MethodSpec::Delta { imputation: None },
            ],
            delta: DeltaConfig::new(16),
            suffix_len: None,
            rank: RankOptions::default(),
            bound: None,
            mode: RunMode::Full,
            outputs: vec![ReportKind::Json, ReportKind::Csv],
            deterministic: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            field: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            reason: e.to_string(),
        })
    }

    pub fn suffix_len(&self) -> usize {
        self.suffix_len.unwrap_or(self.n.min(128))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("n", "must be >= 2"));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be >= 1"));
        }
        match &self.workload {
            WorkloadSpec::Needle {
                num_pairs,
                signal_strength,
            } => {
                if !(*signal_strength > 0.0 && signal_strength.is_finite()) {
                    return Err(Error::config(
                        "workload.signal_strength",
                        "must be positive and finite",
                    ));
                }
                if *num_pairs == 0 || 2 * num_pairs > self.n {
                    return Err(Error::config(
                        "workload.num_pairs",
                        format!("need 1 <= num_pairs <= n / 2, got {num_pairs} with n = {}", self.n),
                    ));
                }
            }
            WorkloadSpec::External { heads } if heads.len() != self.heads => {
                return Err(Error::config(
                    "workload.heads",
                    format!("{} tensor triples for {} heads", heads.len(), self.heads),
                ));
            }
            _ => {}
        }
        if self.suffix_len() > self.n {
            return Err(Error::config(
                "suffix_len",
                format!("{} exceeds n = {}", self.suffix_len(), self.n),
            ));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            let field = format!("patterns[{i}]");
            match p {
                PatternSpec::SinkWindow { window: 0, .. } => {
                    return Err(Error::config(field + ".window", "must be >= 1"))
                }
                PatternSpec::OracleTopK { k: 0 } => {
                    return Err(Error::config(field + ".k", "must be >= 1"))
                }
                _ => {}
            }
        }
        if self.methods.iter().any(|m| !matches!(m, MethodSpec::Dense)) && self.patterns.is_empty()
        {
            return Err(Error::config("patterns", "sparse methods need at least one pattern"));
        }
        self.delta.validate(self.n).map_err(|e| match e {
            Error::Config { field, reason } => Error::config(
                if field.starts_with("delta") { field } else { format!("delta.{field}") },
                reason,
            ),
            other => other,
        })?;
        for (i, m) in self.methods.iter().enumerate() {
            if let MethodSpec::Delta {
                imputation: Some(imp),
            } = m
            {
                self.delta
                    .clone()
                    .with_imputation(*imp)
                    .validate(self.n)
                    .map_err(|e| Error::config(format!("methods[{i}].imputation"), e.to_string()))?;
            }
        }
        if let Some(BoundSpec {
            rows: Some(rows), ..
        }) = &self.bound
        {
            if rows.is_empty() {
                return Err(Error::config("bound.rows", "must not be empty"));
            }
            if let Some(bad) = rows.iter().find(|&&r| r >= self.n) {
                return Err(Error::config("bound.rows", format!("row {bad} out of range")));
            }
        }
        let mut seen = HashSet::new();
        for m in self.resolve_methods() {
            if !seen.insert(m.to_string()) {
                return Err(Error::config("methods", format!("`{m}` is listed twice")));
            }
        }
        Ok(())
    }

    /// Methods in report order: each spec crossed with each pattern, dense once.
    pub fn resolve_methods(&self) -> Vec<Method> {
        let patterns: Vec<SparsityPattern> =
            self.patterns.iter().map(|p| p.resolve(self.n)).collect();
        let mut out = Vec::new();
        for spec in &self.methods {
            match spec {
                MethodSpec::Dense => out.push(Method::Dense),
                MethodSpec::Sparse => out.extend(
                    patterns
                        .iter()
                        .map(|p| Method::Sparse { pattern: p.clone() }),
                ),
                MethodSpec::Recompute => out.extend(patterns.iter().map(|p| Method::Recompute {
                    pattern: p.clone(),
                    delta: self.delta.clone(),
                })),
                MethodSpec::Delta { imputation } => {
                    let delta = match imputation {
                        Some(imp) => self.delta.clone().with_imputation(*imp),
                        None => self.delta.clone(),
                    };
                    out.extend(patterns.iter().map(|p| Method::Delta {
                        pattern: p.clone(),
                        delta: delta.clone(),
                    }))
                }
            }
        }
        out
    }
}

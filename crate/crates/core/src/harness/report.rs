//! Report files. JSON mirrors the report structs; CSV writes one file per
//! table with the fixed headers below. Floats are written with 17 significant
//! digits in both formats.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::harness::config::ReportKind;
use crate::harness::experiment::{BenchTable, RunReport, SweepReport};

pub const COMPARISON_HEADER: &str = "head,method,row,cosine,spearman";
pub const COST_HEADER: &str =
    "method,n,dense_entries,method_entries,sparsity,flop_ratio_vs_dense,dense_row_entries";
pub const SUMMARY_HEADER: &str =
    "method,mean_cosine,median_cosine,mean_spearman,median_spearman,mean_needle_score";
pub const BOUND_HEADER: &str = "head,pattern,row,head_sum,tail_sum,tail_max,remainder,bound,head_contribution,empirical_delta_error,selection_is_top_k";
pub const TIMING_HEADER: &str = "head,method,millis";
pub const BENCH_HEADER: &str = "method,median_ms,min_ms,entries,entry_ratio_vs_dense";
pub const SWEEP_HEADER: &str =
    "gamma,window,method,mean_cosine,mean_spearman,mean_needle_score,sparsity";

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Pretty JSON whose numbers carry 17 significant digits.
struct SigDigits(PrettyFormatter<'static>);

impl Formatter for SigDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigits(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("report types serialize");
    out.push(b'\n');
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &str) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(file));
        writer
            .write_record(header.split(','))
            .map_err(|e| csv_error(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer
            .write_record(fields)
            .map_err(|e| csv_error(&self.path, e))
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `report.json` and/or the CSV tables into `dir`; returns the paths
/// written.
pub fn emit_report(report: &RunReport, dir: &Path, kinds: &[ReportKind]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    if kinds.contains(&ReportKind::Json) {
        let path = dir.join("report.json");
        write_file(&path, &to_json_bytes(report))?;
        written.push(path);
    }
    if kinds.contains(&ReportKind::Csv) {
        written.extend(emit_csv(report, dir)?);
    }
    Ok(written)
}

fn emit_csv(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();

    let mut t = Table::create(dir, "comparison.csv", COMPARISON_HEADER)?;
    for h in &report.heads {
        for m in &h.methods {
            let c = &m.comparison;
            let suffix_start = c.suffix_rows.first().copied().unwrap_or(c.cosines.len());
            for (row, &cos) in c.cosines.iter().enumerate() {
                let rho = row
                    .checked_sub(suffix_start)
                    .and_then(|k| c.rhos.get(k))
                    .map(|&r| fmt_f64(r))
                    .unwrap_or_default();
                t.row([h.head.to_string(), m.method.clone(), row.to_string(), fmt_f64(cos), rho])?;
            }
        }
    }
    out.push(t.finish()?);

    let mut t = Table::create(dir, "cost.csv", COST_HEADER)?;
    for s in &report.summary {
        let c = &s.cost;
        t.row([
            s.method.clone(),
            c.n.to_string(),
            c.dense_entries.to_string(),
            c.method_entries.to_string(),
            fmt_f64(c.sparsity),
            fmt_f64(c.flop_ratio_vs_dense),
            c.dense_row_entries.to_string(),
        ])?;
    }
    out.push(t.finish()?);

    let mut t = Table::create(dir, "summary.csv", SUMMARY_HEADER)?;
    for s in &report.summary {
        t.row([
            s.method.clone(),
            fmt_opt(s.mean_cosine),
            fmt_opt(s.median_cosine),
            fmt_opt(s.mean_spearman),
            fmt_opt(s.median_spearman),
            fmt_opt(s.mean_needle_score),
        ])?;
    }
    out.push(t.finish()?);

    if report.heads.iter().any(|h| h.bound.is_some()) {
        let mut t = Table::create(dir, "bound.csv", BOUND_HEADER)?;
        for h in &report.heads {
            for pb in h.bound.iter().flat_map(|b| &b.patterns) {
                for r in &pb.rows {
                    t.row([
                        h.head.to_string(),
                        pb.pattern.clone(),
                        r.row.to_string(),
                        fmt_f64(r.head_sum),
                        fmt_f64(r.tail_sum),
                        fmt_f64(r.tail_max),
                        fmt_f64(r.remainder),
                        fmt_f64(r.bound),
                        fmt_f64(r.head_contribution),
                        fmt_f64(r.empirical_delta_error),
                        r.selection_is_top_k.to_string(),
                    ])?;
                }
            }
        }
        out.push(t.finish()?);
    }

    let mut t = Table::create(dir, "timing.csv", TIMING_HEADER)?;
    for tm in &report.timings {
        t.row([tm.head.to_string(), tm.method.clone(), fmt_f64(tm.millis)])?;
    }
    out.push(t.finish()?);
    Ok(out)
}

pub fn emit_bench(table: &BenchTable, dir: &Path, kinds: &[ReportKind]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    if kinds.contains(&ReportKind::Json) {
        let path = dir.join("bench.json");
        write_file(&path, &to_json_bytes(table))?;
        written.push(path);
    }
    if kinds.contains(&ReportKind::Csv) {
        let mut t = Table::create(dir, "bench.csv", BENCH_HEADER)?;
        for r in &table.rows {
            t.row([
                r.method.clone(),
                fmt_f64(r.median_ms),
                fmt_f64(r.min_ms),
                r.entries.to_string(),
                fmt_f64(r.entry_ratio_vs_dense),
            ])?;
        }
        written.push(t.finish()?);
    }
    Ok(written)
}

pub fn emit_sweep(report: &SweepReport, dir: &Path, kinds: &[ReportKind]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    if kinds.contains(&ReportKind::Json) {
        let path = dir.join("sweep.json");
        write_file(&path, &to_json_bytes(report))?;
        written.push(path);
    }
    if kinds.contains(&ReportKind::Csv) {
        let mut t = Table::create(dir, "sweep.csv", SWEEP_HEADER)?;
        for r in &report.rows {
            t.row([
                r.gamma.to_string(),
                r.window.to_string(),
                r.method.clone(),
                fmt_opt(r.mean_cosine),
                fmt_opt(r.mean_spearman),
                fmt_opt(r.mean_needle_score),
                fmt_f64(r.sparsity),
            ])?;
        }
        written.push(t.finish()?);
    }
    Ok(written)
}

/// Writes any serializable report as `name` in `dir`.
pub fn emit_json<T: Serialize>(value: &T, dir: &Path, name: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    write_file(&path, &to_json_bytes(value))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{ExperimentConfig, MethodSpec};
    use crate::harness::experiment::run_experiment;

    fn small(methods: Vec<MethodSpec>) -> ExperimentConfig {
        ExperimentConfig {
            n: 32,
            d: 4,
            heads: 2,
            methods,
            delta: crate::delta::DeltaConfig::new(4),
            patterns: vec![crate::harness::config::PatternSpec::SinkWindow { sink: 1, window: 4 }],
            bound: Some(Default::default()),
            deterministic: true,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn float_format() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(-0.1).parse::<f64>().unwrap(), -0.1);
        let x = 0.1 + 0.2;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn json_round_trip() {
        let report = run_experiment(&small(ExperimentConfig::default().methods)).unwrap();
        let bytes = to_json_bytes(&report);
        let back: RunReport = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, report);
        assert_eq!(to_json_bytes(&back), bytes);
    }

    #[test]
    fn empty_methods_still_valid() {
        let report = run_experiment(&small(vec![])).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&to_json_bytes(&report)).unwrap();
        assert_eq!(v["methods"], serde_json::json!([]));
        assert_eq!(v["summary"], serde_json::json!([]));
        assert_eq!(v["heads"][0]["methods"], serde_json::json!([]));
    }

    #[test]
    fn csv_tables_have_documented_headers() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&small(ExperimentConfig::default().methods)).unwrap();
        let files = emit_report(&report, dir.path(), &[ReportKind::Csv]).unwrap();
        let first_line = |name: &str| {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            text.lines().next().unwrap().to_string()
        };
        assert_eq!(first_line("comparison.csv"), COMPARISON_HEADER);
        assert_eq!(first_line("cost.csv"), COST_HEADER);
        assert_eq!(first_line("summary.csv"), SUMMARY_HEADER);
        assert_eq!(first_line("bound.csv"), BOUND_HEADER);
        assert_eq!(first_line("timing.csv"), TIMING_HEADER);
        assert_eq!(files.len(), 5);
        let rows = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        // 2 heads x 4 methods x 32 rows
        assert_eq!(rows.lines().count(), 1 + 2 * 4 * 32);
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let report = run_experiment(&small(vec![MethodSpec::Dense])).unwrap();
        let err = emit_report(&report, &blocker.join("sub"), &[ReportKind::Json]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

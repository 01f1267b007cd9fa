//! Output files: `metrics.jsonl`, `summary.csv`, `params.json`, `sweep.csv`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{BenchError, Result};
use crate::run::{RunResult, StepRecord, SweepRow};

pub const METRICS_SCHEMA: &str = "gradcache-bench/metrics";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const STEP_FIELDS: [&str; 8] =
    ["step", "epoch", "loss", "fwd_count", "bwd_count", "act_peak", "cache_floats", "wall_ms"];

#[derive(Serialize)]
struct SchemaHeader<'a> {
    schema: &'a str,
    version: u32,
    fields: &'a [&'a str],
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| BenchError::io(path, e))
}

fn encode<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| BenchError::Encode(e.to_string()))
}

/// Schema header line, then one JSON object per step.
pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = create(path)?;
    let header = SchemaHeader { schema: METRICS_SCHEMA, version: METRICS_SCHEMA_VERSION, fields: &STEP_FIELDS };
    let mut out = encode(&header)?;
    out.push('\n');
    for r in records {
        out.push_str(&encode(r)?);
        out.push('\n');
    }
    w.write_all(out.as_bytes()).and_then(|_| w.flush()).map_err(|e| BenchError::io(path, e))
}

pub fn summary_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = [
        "mode", "batch_size", "sub_batch_s", "sub_batch_t", "workers", "temperature", "optimizer", "lr", "epochs",
        "seed", "steps", "final_loss", "mean_loss", "loss_var",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(ks.iter().map(|k| format!("hit@{k}")));
    h.extend(["max_act_peak", "max_cache_floats", "fwd_total", "bwd_total", "wall_ms_total"].map(String::from));
    h
}

/// Loss mean and population variance over the steps.
pub fn loss_stats(records: &[StepRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.loss).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.loss - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn summary_row(run: &RunResult) -> Vec<String> {
    let c = &run.config;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let (mean, var) = loss_stats(&run.records);
    let last = run.records.last().map(|r| r.loss.to_string()).unwrap_or_default();
    let mut row = vec![
        c.mode.to_string(),
        c.batch_size.to_string(),
        opt(c.sub_batch_s),
        opt(c.sub_batch_t),
        c.workers.to_string(),
        c.temperature.to_string(),
        format!("{:?}", c.optimizer).to_lowercase(),
        c.lr.to_string(),
        c.epochs.to_string(),
        c.seed.to_string(),
        run.records.len().to_string(),
        last,
        if run.records.is_empty() { String::new() } else { mean.to_string() },
        if run.records.is_empty() { String::new() } else { var.to_string() },
    ];
    row.extend(run.eval.hits.iter().map(|h| h.to_string()));
    row.push(run.records.iter().map(|r| r.act_peak).max().unwrap_or(0).to_string());
    row.push(run.records.iter().map(|r| r.cache_floats).max().unwrap_or(0).to_string());
    row.push(run.records.iter().map(|r| r.fwd_count).sum::<u64>().to_string());
    row.push(run.records.iter().map(|r| r.bwd_count).sum::<u64>().to_string());
    row.push(run.records.iter().map(|r| r.wall_ms).sum::<f64>().to_string());
    row
}

/// Header plus one row per run; all runs must share `ks`.
pub fn write_summary(path: &Path, ks: &[usize], runs: &[&RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::Encode(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| BenchError::Encode(format!("{}: {e}", path.display()));
    w.write_record(summary_header(ks)).map_err(csv_err)?;
    for run in runs {
        if run.eval.ks != ks {
            return Err(BenchError::Config("runs in one summary must share eval_k".into()));
        }
        w.write_record(summary_row(run)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| BenchError::Encode(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| BenchError::Encode(format!("{}: {e}", path.display()));
    w.write_record([
        "mode", "batch_size", "act_peak", "rep_store_peak", "cache_floats", "total_peak", "fwd_count", "bwd_count",
        "loss", "wall_ms",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

/// Writes `metrics.jsonl`, `summary.csv` and `params.json` into `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    write_metrics(&dir.join("metrics.jsonl"), &run.records)?;
    write_summary(&dir.join("summary.csv"), &run.config.eval_k, &[run])?;
    run.model.save(&dir.join("params.json"))
}

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::RunRecord;
use crate::autodiff::Tensor;
use crate::data::MetricKind;
use crate::diversity::export_heatmap;
use crate::error::{Error, Result};
use crate::metrics::{delta_improvement, negative_transfer, TaskResult};
use crate::params::ParamSet;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const MASK_FILE: &str = "mask.json";
pub const DIVERSITY_FILE: &str = "diversity.csv";
pub const PARAMS_FILE: &str = "params.txt";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the run's artifacts into `dir`, creating it if needed.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), record.config.to_json()?)?;

    let mut w = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    w.write_record(["task", "metric", "value", "samples"])?;
    for r in &record.test {
        let metric = match r.metric {
            MetricKind::Auc => "auc",
            MetricKind::Kappa => "kappa",
        };
        w.write_record([r.task.clone(), metric.into(), r.value.to_string(), r.samples.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(HISTORY_FILE))?;
    let mut header = vec!["epoch".to_string(), "lr".to_string()];
    for prefix in ["train_loss", "val_loss", "val_metric"] {
        header.extend(record.tasks.iter().map(|t| format!("{prefix}.{t}")));
    }
    w.write_record(&header)?;
    for e in &record.history {
        let mut row = vec![e.epoch.to_string(), e.lr.to_string()];
        row.extend(e.train_loss.iter().map(f64::to_string));
        row.extend(e.val_loss.iter().map(f64::to_string));
        row.extend(e.val_metric.iter().map(|m| cell(*m)));
        w.write_record(&row)?;
    }
    w.flush()?;

    if let Some(mask) = &record.mask {
        mask.save(&dir.join(MASK_FILE))?;
    }
    if let Some(report) = &record.diversity {
        export_heatmap(report, &dir.join(DIVERSITY_FILE))?;
    }
    std::fs::write(dir.join(PARAMS_FILE), dump_params(&record.params))?;
    Ok(())
}

/// One line per tensor: `name<TAB>shape<TAB>values`, shape as `AxB`, values
/// space-separated in shortest round-trip form.
pub fn dump_params(params: &ParamSet) -> String {
    let mut out = String::new();
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{name}\t{}\t{}", shape.join("x"), values.join(" "));
    }
    out
}

pub fn parse_params(text: &str) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |m: &str| Error::Data(format!("parameter dump line {}: {m}", i + 1));
        let mut parts = line.split('\t');
        let (Some(name), Some(shape), Some(values)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected three tab-separated fields"));
        };
        let shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|s| s.parse().map_err(|_| bad("bad shape")))
                .collect::<Result<Vec<usize>>>()?
        };
        let data = values
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<f64>>>()?;
        params.push(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Model name and test results of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub results: Vec<TaskResult>,
}

impl RunRecord {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            model: self.config.model.kind.name().to_string(),
            results: self.test.clone(),
        }
    }
}

/// Reads the summary back from a run directory.
pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let mut reader = csv::Reader::from_path(dir.join(METRICS_FILE))?;
    let mut results = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let metric = match get(1).as_str() {
            "auc" => MetricKind::Auc,
            "kappa" => MetricKind::Kappa,
            other => return Err(Error::Data(format!("unknown metric `{other}` in {}", dir.display()))),
        };
        let value: f64 = get(2)
            .parse()
            .map_err(|_| Error::Data(format!("bad metric value in {}", dir.display())))?;
        let samples: usize = get(3).parse().unwrap_or(0);
        results.push(TaskResult::new(&get(0), metric, value, samples)?);
    }
    Ok(RunSummary {
        model: config.model.kind.name().to_string(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub values: Vec<f64>,
    pub delta_pct: f64,
    pub nt: usize,
}

/// Per-model test metrics against the single-task baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub tasks: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn aligned(summary: &RunSummary, tasks: &[String]) -> Result<Vec<f64>> {
    if summary.results.len() != tasks.len() {
        return Err(Error::Contract(format!(
            "{} reports {} tasks, baseline has {}",
            summary.model,
            summary.results.len(),
            tasks.len()
        )));
    }
    tasks
        .iter()
        .map(|t| {
            summary
                .results
                .iter()
                .find(|r| &r.task == t)
                .map(|r| r.value)
                .ok_or_else(|| Error::Contract(format!("{} has no result for task {t}", summary.model)))
        })
        .collect()
}

/// Table with the baseline first (Δ = 0, NT = 0) followed by each model.
pub fn compare_runs(stl: &RunSummary, mtl: &[RunSummary]) -> Result<ComparisonTable> {
    let tasks: Vec<String> = stl.results.iter().map(|r| r.task.clone()).collect();
    let base = aligned(stl, &tasks)?;
    let mut rows = Vec::with_capacity(mtl.len() + 1);
    for summary in std::iter::once(stl).chain(mtl) {
        let values = aligned(summary, &tasks)?;
        rows.push(ComparisonRow {
            model: summary.model.clone(),
            delta_pct: delta_improvement(&base, &values)?,
            nt: negative_transfer(&base, &values)?,
            values,
        });
    }
    Ok(ComparisonTable { tasks, rows })
}

impl ComparisonTable {
    /// `model,<task>...,delta_pct,nt` with one row per model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",delta_pct,nt\n");
        for r in &self.rows {
            out.push_str(&r.model);
            for v in &r.values {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", r.delta_pct, r.nt);
        }
        out
    }
}

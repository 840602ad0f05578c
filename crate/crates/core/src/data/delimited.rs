//! Comma-separated dataset files with a JSON schema sidecar.
//!
//! Line numbers in errors count the header as line 1. An empty label cell
//! marks that task's label as missing for the row.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Features, Splits, TaskKind, TaskLabels, TaskSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskColumns {
    pub spec: TaskSpec,
    /// Label columns, `spec.label_width(steps)` of them.
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    Indices(Splits),
    /// Column holding `train`, `val` or `test` per row.
    Column(String),
    Random { train: f64, val: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelimitedSchema {
    /// Feature columns; time-major (`T·d` of them) when `steps` is set.
    pub feature_columns: Vec<String>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub tasks: Vec<TaskColumns>,
    pub split: SplitSource,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".schema.json");
    PathBuf::from(name)
}

pub fn read_schema(csv_path: &Path) -> Result<DelimitedSchema> {
    let text = std::fs::read_to_string(sidecar(csv_path))?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_err(path: &Path, line: u64, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    }
}

pub fn load_delimited(path: &Path, schema: &DelimitedSchema) -> Result<DatasetBundle> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let column = |name: &str| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
    };
    let feature_idx: Vec<usize> = schema.feature_columns.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let label_idx: Vec<Vec<usize>> = schema
        .tasks
        .iter()
        .map(|t| t.columns.iter().map(|c| column(c)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let split_idx = match &schema.split {
        SplitSource::Column(name) => Some(column(name)?),
        _ => None,
    };
    for t in &schema.tasks {
        t.spec.validate()?;
        let want = t.spec.label_width(schema.steps);
        if t.columns.len() != want {
            return Err(Error::Config(format!(
                "task {} needs {want} label columns, schema lists {}",
                t.spec.name,
                t.columns.len()
            )));
        }
    }

    let mut features = Vec::new();
    let mut labels: Vec<TaskLabels> = schema
        .tasks
        .iter()
        .map(|t| TaskLabels {
            width: t.columns.len(),
            values: Vec::new(),
            observed: Vec::new(),
        })
        .collect();
    let mut split_of_row = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader
            .read_record(&mut record)
            .map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        for &i in &feature_idx {
            let cell = record.get(i).unwrap_or("").trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric feature cell `{cell}`")))?;
            features.push(v);
        }
        for ((task, idx), out) in schema.tasks.iter().zip(&label_idx).zip(labels.iter_mut()) {
            let cells: Vec<&str> = idx.iter().map(|&i| record.get(i).unwrap_or("").trim()).collect();
            if cells.iter().all(|c| c.is_empty()) {
                out.values.extend(std::iter::repeat_n(0.0, cells.len()));
                out.observed.push(false);
                continue;
            }
            for cell in cells {
                out.values.push(parse_label(&task.spec, cell).ok_or_else(|| {
                    parse_err(path, line, format!("unknown label value `{cell}` for task {}", task.spec.name))
                })?);
            }
            out.observed.push(true);
        }
        if let Some(i) = split_idx {
            split_of_row.push(match record.get(i).unwrap_or("").trim() {
                "train" => 0,
                "val" => 1,
                "test" => 2,
                other => return Err(parse_err(path, line, format!("unknown split `{other}`"))),
            });
        }
    }

    let width = schema.feature_columns.len();
    let n = if width == 0 { 0 } else { features.len() / width };
    let features = match schema.steps {
        None => Features::Tabular(Tensor::matrix(n, width, features)?),
        Some(t) if t > 0 && width % t == 0 => Features::Sequential(Tensor::new(vec![n, t, width / t], features)?),
        Some(t) => {
            return Err(Error::Config(format!(
                "{width} feature columns do not divide into {t} steps"
            )))
        }
    };
    let splits = match &schema.split {
        SplitSource::Indices(s) => s.clone(),
        SplitSource::Random { train, val, seed } => Splits::shuffled(n, *train, *val, *seed)?,
        SplitSource::Column(_) => {
            let pick = |which| (0..n).filter(|&i| split_of_row[i] == which).collect();
            Splits {
                train: pick(0),
                val: pick(1),
                test: pick(2),
            }
        }
    };
    let bundle = DatasetBundle {
        features,
        tasks: schema.tasks.iter().map(|t| t.spec.clone()).collect(),
        labels,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn parse_label(spec: &TaskSpec, cell: &str) -> Option<f64> {
    let v: f64 = cell.parse().ok()?;
    match spec.kind {
        TaskKind::Multiclass(c) => (v.fract() == 0.0 && v >= 0.0 && v < c as f64).then_some(v),
        _ => (v == 0.0 || v == 1.0).then_some(v),
    }
}

/// Writes `bundle` to `path` and its schema (with explicit split indices) to
/// the sidecar next to it. Returns the schema.
pub fn write_delimited(bundle: &DatasetBundle, path: &Path) -> Result<DelimitedSchema> {
    let steps = bundle.steps();
    let d = bundle.input_dim();
    let feature_columns: Vec<String> = match steps {
        None => (0..d).map(|j| format!("x{j}")).collect(),
        Some(t) => (0..t).flat_map(|s| (0..d).map(move |j| format!("t{s}_x{j}"))).collect(),
    };
    let tasks: Vec<TaskColumns> = bundle
        .tasks
        .iter()
        .zip(&bundle.labels)
        .map(|(spec, labels)| TaskColumns {
            spec: spec.clone(),
            columns: if labels.width == 1 {
                vec![format!("y_{}", spec.name)]
            } else {
                (0..labels.width).map(|i| format!("y_{}_{i}", spec.name)).collect()
            },
        })
        .collect();

    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(feature_columns.iter().chain(tasks.iter().flat_map(|t| &t.columns)))?;
    let x = match &bundle.features {
        Features::Tabular(t) | Features::Sequential(t) => t.data(),
    };
    let row_len = feature_columns.len();
    for i in 0..bundle.samples() {
        let mut row: Vec<String> = x[i * row_len..(i + 1) * row_len].iter().map(f64::to_string).collect();
        for labels in &bundle.labels {
            if labels.observed[i] {
                row.extend(labels.sample(i).iter().map(f64::to_string));
            } else {
                row.extend(std::iter::repeat_n(String::new(), labels.width));
            }
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;

    let schema = DelimitedSchema {
        feature_columns,
        steps,
        tasks,
        split: SplitSource::Indices(bundle.splits.clone()),
    };
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&schema)?)?;
    Ok(schema)
}

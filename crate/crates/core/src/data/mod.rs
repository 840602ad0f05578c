//! Multi-task datasets: task metadata, bundles with splits, batching, and the
//! synthetic generators / delimited loader that produce them.

mod delimited;
mod synth;

pub use delimited::{load_delimited, read_schema, write_delimited, DelimitedSchema, SplitSource, TaskColumns};
pub use synth::{
    gen_manytask_suite, gen_tabular_suite, gen_temporal_suite, ManyTaskConfig, TabularConfig, TemporalConfig,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::layers::{Flow, Temporal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass(usize),
    Multilabel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auc,
    Kappa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub temporal: Temporal,
    pub loss: LossKind,
    pub pos_weight: f64,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn binary(name: &str, pos_weight: f64) -> Self {
        TaskSpec {
            name: name.to_string(),
            kind: TaskKind::Binary,
            temporal: Temporal::PerSequence,
            loss: LossKind::Bce,
            pos_weight,
            metric: MetricKind::Auc,
        }
    }

    /// Width of the tower output.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Binary => 1,
            TaskKind::Multiclass(c) => c,
            TaskKind::Multilabel(l) => l,
        }
    }

    /// Stored label values per sample.
    pub fn label_width(&self, steps: Option<usize>) -> usize {
        match (self.temporal, steps) {
            (Temporal::PerStep, Some(t)) => t * self.values_per_prediction(),
            _ => self.values_per_prediction(),
        }
    }

    fn values_per_prediction(&self) -> usize {
        match self.kind {
            TaskKind::Binary | TaskKind::Multiclass(_) => 1,
            TaskKind::Multilabel(l) => l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config(format!("task {}: pos_weight must be > 0", self.name)));
        }
        match (self.kind, self.loss, self.metric) {
            (TaskKind::Multiclass(c), LossKind::CrossEntropy, _) if c >= 2 => Ok(()),
            (TaskKind::Multiclass(_), LossKind::CrossEntropy, _) => {
                Err(Error::Config(format!("task {}: multiclass needs at least 2 classes", self.name)))
            }
            (TaskKind::Multiclass(_), LossKind::Bce, _) => Err(Error::Config(format!(
                "task {}: multiclass tasks use cross entropy",
                self.name
            ))),
            (_, _, MetricKind::Kappa) => Err(Error::Config(format!(
                "task {}: kappa is only defined for multiclass tasks",
                self.name
            ))),
            (_, LossKind::CrossEntropy, _) => Err(Error::Config(format!(
                "task {}: cross entropy needs a multiclass task",
                self.name
            ))),
            (TaskKind::Multilabel(0), _, _) => {
                Err(Error::Config(format!("task {}: multilabel needs at least one label", self.name)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    /// `N × d`.
    Tabular(Tensor),
    /// `N × T × d`.
    Sequential(Tensor),
}

impl Features {
    pub fn samples(&self) -> usize {
        match self {
            Features::Tabular(t) | Features::Sequential(t) => t.shape()[0],
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Features::Tabular(t) | Features::Sequential(t) => t.cols(),
        }
    }

    pub fn steps(&self) -> Option<usize> {
        match self {
            Features::Tabular(_) => None,
            Features::Sequential(t) => Some(t.shape()[1]),
        }
    }
}

/// Per-task labels, `width` values per sample, plus a per-sample observed flag.
/// Values of unobserved samples are stored as zero and never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub width: usize,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl TaskLabels {
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Splits {
    /// Sizes `round(n·train)`, `round(n·val)`, and the remainder.
    pub fn sizes(n: usize, train: f64, val: f64) -> Result<(usize, usize, usize)> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
            return Err(Error::Config(format!("invalid split fractions {train}/{val}")));
        }
        let a = ((n as f64 * train).round() as usize).min(n);
        let b = ((n as f64 * val).round() as usize).min(n - a);
        Ok((a, b, n - a - b))
    }

    /// Seeded random partition of `0..n`.
    pub fn shuffled(n: usize, train: f64, val: f64, seed: u64) -> Result<Self> {
        let (a, b, _) = Splits::sizes(n, train, val)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = idx.split_off(a + b);
        let val = idx.split_off(a);
        Ok(Splits { train: idx, val, test })
    }

    pub fn get(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Disjoint and exhaustive over `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} repeated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("splits do not cover every sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub features: Features,
    pub tasks: Vec<TaskSpec>,
    pub labels: Vec<TaskLabels>,
    pub splits: Splits,
}

/// Inputs for one batch.
#[derive(Debug, Clone)]
pub enum BatchInput {
    Flat(Tensor),
    /// One `B × d` matrix per step.
    Seq(Vec<Tensor>),
}

impl BatchInput {
    pub fn bind(&self, tape: &Tape) -> Flow {
        match self {
            BatchInput::Flat(t) => Flow::Flat(tape.leaf(t.clone())),
            BatchInput::Seq(steps) => Flow::Seq(steps.iter().map(|t| tape.leaf(t.clone())).collect()),
        }
    }
}

/// Targets laid out to match the rows of the corresponding tower output.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Binary targets, `width` per output row (1 for binary, L for multilabel).
    Binary {
        values: Vec<f64>,
        weights: Vec<f64>,
        width: usize,
    },
    /// Class index per output row.
    Classes { values: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: BatchInput,
    pub targets: Vec<Targets>,
    pub size: usize,
}

impl DatasetBundle {
    pub fn samples(&self) -> usize {
        self.features.samples()
    }

    pub fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    pub fn steps(&self) -> Option<usize> {
        self.features.steps()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.samples();
        if self.tasks.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} task specs but {} label sets",
                self.tasks.len(),
                self.labels.len()
            )));
        }
        for (spec, labels) in self.tasks.iter().zip(&self.labels) {
            spec.validate()?;
            let width = spec.label_width(self.steps());
            if labels.width != width || labels.values.len() != n * width || labels.observed.len() != n {
                return Err(Error::Data(format!("labels of task {} do not match its spec", spec.name)));
            }
            if self.steps().is_none() && spec.temporal != Temporal::PerSequence {
                return Err(Error::Data(format!(
                    "task {} is temporal but the features are tabular",
                    spec.name
                )));
            }
        }
        self.splits.validate(n)
    }

    /// Gathers the rows `indices` into model inputs and loss targets. Per-step
    /// targets are time-major to match per-step tower output.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let b = indices.len();
        let input = match &self.features {
            Features::Tabular(t) => BatchInput::Flat(t.select_rows(indices)),
            Features::Sequential(t) => {
                let (steps, d) = (t.shape()[1], t.shape()[2]);
                let data = t.data();
                BatchInput::Seq(
                    (0..steps)
                        .map(|s| {
                            let mut rows = Vec::with_capacity(b * d);
                            for &i in indices {
                                let off = (i * steps + s) * d;
                                rows.extend_from_slice(&data[off..off + d]);
                            }
                            Tensor::matrix(b, d, rows).expect("batch slice")
                        })
                        .collect(),
                )
            }
        };
        let steps = self.steps();
        let targets = self
            .tasks
            .iter()
            .zip(&self.labels)
            .map(|(spec, labels)| arrange_targets(spec, labels, indices, steps))
            .collect();
        Batch {
            input,
            targets,
            size: b,
        }
    }
}

fn arrange_targets(spec: &TaskSpec, labels: &TaskLabels, indices: &[usize], steps: Option<usize>) -> Targets {
    let b = indices.len();
    let weight = |i: usize| if labels.observed[i] { 1.0 } else { 0.0 };
    let (values, weights, per_row): (Vec<f64>, Vec<f64>, usize) = match (spec.temporal, steps) {
        (Temporal::PerStep, Some(t)) => {
            let per = spec.values_per_prediction();
            let mut values = Vec::with_capacity(t * b * per);
            let mut weights = Vec::with_capacity(t * b * per);
            for s in 0..t {
                for &i in indices {
                    let row = labels.sample(i);
                    values.extend_from_slice(&row[s * per..(s + 1) * per]);
                    weights.extend(std::iter::repeat_n(weight(i), per));
                }
            }
            (values, weights, per)
        }
        _ => {
            let per = labels.width;
            let mut values = Vec::with_capacity(b * per);
            let mut weights = Vec::with_capacity(b * per);
            for &i in indices {
                values.extend_from_slice(labels.sample(i));
                weights.extend(std::iter::repeat_n(weight(i), per));
            }
            (values, weights, per)
        }
    };
    match spec.kind {
        TaskKind::Multiclass(_) => Targets::Classes {
            values: values
                .iter()
                .zip(&weights)
                .map(|(&v, &w)| if w > 0.0 { v as usize } else { 0 })
                .collect(),
            weights,
        },
        _ => Targets::Binary {
            values,
            weights,
            width: per_row,
        },
    }
}

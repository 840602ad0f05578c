use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelChoice, TrainingConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::{DatasetBundle, MetricKind, SplitName, Targets};
use crate::diversity::{diversity_report, DiversityReport};
use crate::error::{Error, Result};
use crate::gating::GateMask;
use crate::metrics::{cohen_kappa, roc_auc, TaskResult};
use crate::model::{task_loss, BatchObjective, Model, ModelSpec};
use crate::optim::{joint_step, maml_mtl_step, Adam, AdamConfig, LrSchedule, MamlConfig, Optimizer};
use crate::params::{derive_seed, ParamSet};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `None` where the metric is undefined on the validation split.
    pub val_metric: Vec<Option<f64>>,
}

/// Where and why training stopped on a non-finite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub epoch: usize,
    pub task: String,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub tasks: Vec<String>,
    pub history: Vec<EpochRecord>,
    /// One entry per trained network: a single one for multi-task models,
    /// one per task for stl.
    pub best_epoch: Vec<usize>,
    pub test: Vec<TaskResult>,
    pub diversity: Option<DiversityReport>,
    pub mask: Option<GateMask>,
    pub params: ParamSet,
    pub abort: Option<AbortInfo>,
    /// Excluded from equality checks between replays.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn complete(&self) -> bool {
        self.abort.is_none()
    }

    /// Record with the wall-clock zeroed, for replay comparisons.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn abort_error(&self) -> Option<Error> {
        self.abort.as_ref().map(|a| Error::NumericalAbort {
            epoch: a.epoch,
            task: a.task.clone(),
            batch: a.batch,
        })
    }
}

/// Loss and metric of each task over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub loss: f64,
    pub metric: Option<f64>,
    pub samples: usize,
}

/// Evaluates `model` on `indices` without building gradients.
pub fn evaluate(model: &Model, bundle: &DatasetBundle, indices: &[usize]) -> Result<Vec<TaskEval>> {
    let k = bundle.tasks.len();
    let mut loss_sum = vec![0.0; k];
    let mut weight_sum = vec![0.0; k];
    // Binary scores per output column, or (pred, truth) class pairs.
    let mut scores: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); k];
    let mut classes: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); k];
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = bundle.batch(chunk);
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let outs = model.forward(&tape, &bound, &batch.input.bind(&tape))?;
        for (t, out) in outs.iter().enumerate() {
            let targets = &batch.targets[t];
            let loss = task_loss(&tape, out, &bundle.tasks[t], targets)?;
            let logits = tape.value(out.logits);
            if !tape.scalar_value(loss).is_finite() || logits.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { task: t });
            }
            match targets {
                Targets::Binary { values, weights, width } => {
                    let w: f64 = weights.iter().sum();
                    loss_sum[t] += tape.scalar_value(loss) * w;
                    weight_sum[t] += w;
                    if scores[t].is_empty() {
                        scores[t] = vec![(Vec::new(), Vec::new()); *width];
                    }
                    for (i, ((&s, &y), &wt)) in logits.data().iter().zip(values).zip(weights).enumerate() {
                        if wt > 0.0 {
                            scores[t][i % width].0.push(s);
                            scores[t][i % width].1.push(y);
                        }
                    }
                }
                Targets::Classes { values, weights } => {
                    let w: f64 = weights.iter().sum();
                    loss_sum[t] += tape.scalar_value(loss) * w;
                    weight_sum[t] += w;
                    for (row, (&y, &wt)) in values.iter().zip(weights).enumerate() {
                        if wt > 0.0 {
                            classes[t].0.push(argmax(logits.row(row)));
                            classes[t].1.push(y);
                        }
                    }
                }
            }
        }
    }
    (0..k)
        .map(|t| {
            let spec = &bundle.tasks[t];
            let (metric, samples) = match spec.metric {
                MetricKind::Auc => {
                    let defined: Vec<f64> = scores[t]
                        .iter()
                        .filter_map(|(s, y)| match roc_auc(s, y) {
                            Ok(v) => Some(Ok(v)),
                            Err(Error::UndefinedMetric(_)) => None,
                            Err(e) => Some(Err(e)),
                        })
                        .collect::<Result<_>>()?;
                    let n = scores[t].first().map_or(0, |c| c.0.len());
                    if defined.is_empty() {
                        log::warn!("task {}: AUC undefined on this split", spec.name);
                        (None, n)
                    } else {
                        (Some(defined.iter().sum::<f64>() / defined.len() as f64), n)
                    }
                }
                MetricKind::Kappa => {
                    let (p, y) = &classes[t];
                    match cohen_kappa(p, y) {
                        Ok(v) => (Some(v), p.len()),
                        Err(Error::UndefinedMetric(_)) => (None, 0),
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(TaskEval {
                loss: if weight_sum[t] > 0.0 { loss_sum[t] / weight_sum[t] } else { 0.0 },
                metric,
                samples,
            })
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Result of training one network.
pub(crate) struct Trained {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub abort: Option<AbortInfo>,
}

pub(crate) fn train_model(
    mut model: Model,
    bundle: &DatasetBundle,
    cfg: &TrainingConfig,
    seed: u64,
    maml: bool,
) -> Result<Trained> {
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    })?;
    let schedule = LrSchedule {
        base: cfg.lr,
        factor: cfg.lr_decay,
        interval: cfg.lr_decay_every,
    };
    let maml_cfg = MamlConfig {
        inner_lr: cfg.inner_lr,
        allow_many_tasks: cfg.allow_many_tasks,
    };
    let k = bundle.tasks.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle"));
    let mut order = bundle.splits.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let initial = model.params().clone();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut abort = None;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = schedule.rate(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut train_loss = vec![0.0; k];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = bundle.batch(chunk);
            let objective = BatchObjective {
                model: &model,
                batch: &batch,
                tasks: &bundle.tasks,
            };
            let mut params = model.params().clone();
            let step = if maml {
                maml_mtl_step(&objective, &mut params, &mut opt, &maml_cfg)
            } else {
                joint_step(&objective, &mut params, &mut opt)
            };
            match step {
                Ok(losses) => {
                    for (acc, l) in train_loss.iter_mut().zip(losses) {
                        *acc += l;
                    }
                    batches += 1;
                    model.params_mut().assign(&params)?;
                }
                Err(Error::NonFiniteLoss { task }) => {
                    let info = AbortInfo {
                        epoch,
                        task: bundle.tasks[task].name.clone(),
                        batch: b,
                    };
                    log::error!("non-finite loss at epoch {epoch}, task {}, batch {b}", info.task);
                    abort = Some(info);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val = match evaluate(&model, bundle, &bundle.splits.val) {
            Ok(val) => val,
            Err(Error::NonFiniteLoss { task }) => {
                log::error!("non-finite validation output at epoch {epoch}, task {}", bundle.tasks[task].name);
                abort = Some(AbortInfo {
                    epoch,
                    task: bundle.tasks[task].name.clone(),
                    batch: batches,
                });
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: train_loss.iter().map(|l| l / batches.max(1) as f64).collect(),
            val_loss: val.iter().map(|v| v.loss).collect(),
            val_metric: val.iter().map(|v| v.metric).collect(),
        };
        let sum: f64 = record.val_metric.iter().flatten().sum();
        log::debug!("epoch {epoch}: val metric sum {sum:.4}");
        if best.as_ref().is_none_or(|(_, s, _)| sum > *s) {
            best = Some((epoch, sum, model.params().clone()));
        }
        history.push(record);
    }
    // With no finished epoch, fall back to the initial parameters.
    let (best_epoch, params) = best.map_or((0, initial), |(epoch, _, params)| (epoch, params));
    model.params_mut().assign(&params)?;
    Ok(Trained {
        model,
        history,
        best_epoch,
        abort,
    })
}

/// Bundle restricted to a single task, sharing features and splits.
fn single_task(bundle: &DatasetBundle, k: usize) -> DatasetBundle {
    DatasetBundle {
        features: bundle.features.clone(),
        tasks: vec![bundle.tasks[k].clone()],
        labels: vec![bundle.labels[k].clone()],
        splits: bundle.splits.clone(),
    }
}

fn test_results(model: &Model, bundle: &DatasetBundle) -> Result<Vec<Option<TaskResult>>> {
    evaluate(model, bundle, &bundle.splits.test)?
        .into_iter()
        .zip(&bundle.tasks)
        .map(|(e, spec)| match e.metric {
            Some(v) => TaskResult::new(&spec.name, spec.metric, v, e.samples).map(Some),
            None => Ok(None),
        })
        .collect()
}

/// Diversity of a trained mixture model's experts on `split`.
pub fn model_diversity(model: &Model, bundle: &DatasetBundle, split: SplitName) -> Result<DiversityReport> {
    let indices = bundle.splits.get(split);
    let mut per_expert: Vec<Vec<f64>> = vec![Vec::new(); model.expert_count()];
    let mut width = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let acts = model.expert_activations(&bundle.batch(chunk).input)?;
        for (acc, t) in per_expert.iter_mut().zip(acts) {
            width = t.cols();
            acc.extend_from_slice(t.data());
        }
    }
    let outputs = per_expert
        .into_iter()
        .map(|d| Tensor::matrix(indices.len(), width, d))
        .collect::<Result<Vec<_>>>()?;
    diversity_report(&outputs)
}

/// Builds the dataset, trains, selects the best epoch on validation, and
/// evaluates on test. Output files are written by [`super::write_outputs`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let started = std::time::Instant::now();
    let bundle = config.dataset.build()?;
    let t = &config.training;
    let arch = config.model.architecture();
    let kind = config.model.kind;
    let input_dim = bundle.input_dim();
    let tasks: Vec<String> = bundle.tasks.iter().map(|s| s.name.clone()).collect();

    let (history, best_epoch, test, diversity, mask, params, abort) = if kind == ModelChoice::Stl {
        let members = (0..bundle.tasks.len())
            .into_par_iter()
            .map(|k| {
                let sub = single_task(&bundle, k);
                let spec = ModelSpec::for_tasks(
                    kind.model_kind(),
                    input_dim,
                    &arch,
                    &sub.tasks,
                    derive_seed(t.seed, &format!("stl.{k}")),
                );
                let trained = train_model(Model::new(spec)?, &sub, t, derive_seed(t.seed, &format!("stl.{k}")), false)?;
                let result = test_results(&trained.model, &sub)?.pop().flatten();
                Ok((trained, result))
            })
            .collect::<Result<Vec<_>>>()?;
        let epochs = members.iter().map(|(m, _)| m.history.len()).min().unwrap_or(0);
        let history = (0..epochs)
            .map(|e| EpochRecord {
                epoch: e,
                lr: members[0].0.history[e].lr,
                train_loss: members.iter().map(|(m, _)| m.history[e].train_loss[0]).collect(),
                val_loss: members.iter().map(|(m, _)| m.history[e].val_loss[0]).collect(),
                val_metric: members.iter().map(|(m, _)| m.history[e].val_metric[0]).collect(),
            })
            .collect();
        let mut params = ParamSet::new();
        for (k, (m, _)) in members.iter().enumerate() {
            for (name, tensor) in m.model.params().iter() {
                params.push(format!("stl.{k}.{name}"), tensor.clone());
            }
        }
        let abort = members.iter().find_map(|(m, _)| m.abort.clone());
        (
            history,
            members.iter().map(|(m, _)| m.best_epoch).collect(),
            members.into_iter().filter_map(|(_, r)| r).collect(),
            None,
            None,
            params,
            abort,
        )
    } else {
        let spec = ModelSpec::for_tasks(kind.model_kind(), input_dim, &arch, &bundle.tasks, derive_seed(t.seed, "model"));
        let trained = train_model(Model::new(spec)?, &bundle, t, t.seed, t.maml)?;
        let test: Vec<TaskResult> = test_results(&trained.model, &bundle)?.into_iter().flatten().collect();
        let diversity = if kind.model_kind().has_gates() && trained.model.expert_count() >= 2 {
            Some(model_diversity(&trained.model, &bundle, t.diversity_split)?)
        } else {
            None
        };
        (
            trained.history,
            vec![trained.best_epoch],
            test,
            diversity,
            trained.model.mask().cloned(),
            trained.model.params().clone(),
            trained.abort,
        )
    };
    Ok(RunRecord {
        config: config.clone(),
        tasks,
        history,
        best_epoch,
        test,
        diversity,
        mask,
        params,
        abort,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

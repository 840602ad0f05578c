//! Model zoo: shared-bottom, MMoE and MMoEEx over a common expert/tower layout.
//!
//! Parameter names are stable across kinds (`expert.{e}.*`, `gate.{k}`,
//! `tower.{k}.*`) and each tensor is seeded from its name, so models built
//! with the same seed share every parameter they have in common.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Batch, BatchInput, TaskSpec, Targets};
use crate::error::{Error, Result};
use crate::gating::{build_mask, gate_forward, mixture_forward, GateMask, MaskMode};
use crate::layers::{Activation, Expert, ExpertKind, ExpertSpec, Flow, Temporal, Tower, TowerSpec};
use crate::params::{derive_seed, Bound, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SharedBottom,
    Mmoe,
    Mmoeex,
}

impl ModelKind {
    pub fn has_gates(self) -> bool {
        !matches!(self, ModelKind::SharedBottom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Expert count; shared-bottom always uses a single bottom network.
    pub experts: usize,
    pub expert: ExpertSpec,
    pub towers: Vec<TowerSpec>,
    pub mask_mode: MaskMode,
    pub alpha: f64,
    pub seed: u64,
}

/// Layer widths used by [`ModelSpec::for_tasks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub experts: usize,
    pub expert_kind: ExpertKind,
    pub expert_hidden: usize,
    pub expert_activation: Activation,
    pub tower_hidden: Vec<usize>,
    pub tower_activation: Activation,
    pub mask_mode: MaskMode,
    pub alpha: f64,
}

impl ModelSpec {
    /// One tower per task, shaped by the task's output kind and time layout.
    pub fn for_tasks(kind: ModelKind, input_dim: usize, arch: &Architecture, tasks: &[TaskSpec], seed: u64) -> Self {
        let towers = tasks
            .iter()
            .enumerate()
            .map(|(k, t)| TowerSpec {
                task: k,
                input_dim: arch.expert_hidden,
                hidden: arch.tower_hidden.clone(),
                output_dim: t.output_dim(),
                temporal: t.temporal,
                activation: arch.tower_activation,
            })
            .collect();
        let (mask_mode, alpha) = match kind {
            ModelKind::Mmoeex => (arch.mask_mode, arch.alpha),
            _ => (MaskMode::None, 0.0),
        };
        ModelSpec {
            kind,
            input_dim,
            experts: if kind == ModelKind::SharedBottom { 1 } else { arch.experts },
            expert: ExpertSpec {
                kind: arch.expert_kind,
                input_dim,
                hidden_dim: arch.expert_hidden,
                activation: arch.expert_activation,
            },
            towers,
            mask_mode,
            alpha,
            seed,
        }
    }

    pub fn task_count(&self) -> usize {
        self.towers.len()
    }

    fn expert_count(&self) -> usize {
        if self.kind == ModelKind::SharedBottom {
            1
        } else {
            self.experts
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.expert.validate()?;
        if self.towers.is_empty() {
            return Err(Error::Config("model needs at least one task tower".into()));
        }
        if self.expert.input_dim != self.input_dim {
            return Err(Error::Config(format!(
                "expert input width {} differs from model input width {}",
                self.expert.input_dim, self.input_dim
            )));
        }
        if self.kind.has_gates() && self.experts == 0 {
            return Err(Error::Config("mixture models need at least one expert".into()));
        }
        if self.kind != ModelKind::Mmoeex && (self.mask_mode != MaskMode::None || self.alpha != 0.0) {
            return Err(Error::Config(format!("{:?} does not take a gate mask", self.kind)));
        }
        for (k, t) in self.towers.iter().enumerate() {
            if t.task != k {
                return Err(Error::Config(format!("tower {k} is labelled task {}", t.task)));
            }
            if t.input_dim != self.expert.hidden_dim {
                return Err(Error::Config(format!(
                    "tower {k} reads width {} but experts emit {}",
                    t.input_dim, self.expert.hidden_dim
                )));
            }
        }
        Ok(())
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let gates = if self.kind.has_gates() {
            self.task_count() * self.experts * self.input_dim
        } else {
            0
        };
        self.expert_count() * self.expert.param_count()
            + gates
            + self.towers.iter().map(TowerSpec::param_count).sum::<usize>()
    }
}

/// Logits of one task. Per-step tasks stack steps time-major
/// (`row = step · batch + sample`).
#[derive(Debug, Clone, Copy)]
pub struct TaskOutput {
    pub task: usize,
    pub logits: Var,
    pub batch: usize,
    pub steps: Option<usize>,
    pub width: usize,
}

impl TaskOutput {
    /// Logical shape: `batch × steps × width` for per-step tasks, else `batch × width`.
    pub fn shape(&self) -> Vec<usize> {
        match self.steps {
            Some(t) => vec![self.batch, t, self.width],
            None => vec![self.batch, self.width],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    mask: Option<GateMask>,
    experts: Vec<Expert>,
    gates: Vec<ParamId>,
    towers: Vec<Tower>,
    params: ParamSet,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (k, e, d) = (spec.task_count(), spec.expert_count(), spec.input_dim);
        let mut params = ParamSet::new();
        let experts = (0..e)
            .map(|i| Expert::new(&mut params, &format!("expert.{i}"), spec.expert.clone(), spec.seed))
            .collect::<Result<Vec<_>>>()?;
        let (gates, mask) = if spec.kind.has_gates() {
            let gates = (0..k)
                .map(|t| params.push_uniform(&format!("gate.{t}"), &[e, d], d, spec.seed))
                .collect();
            let mask = match spec.kind {
                ModelKind::Mmoeex => build_mask(k, e, spec.alpha, spec.mask_mode, derive_seed(spec.seed, "mask"))?,
                _ => GateMask::full(k, e),
            };
            (gates, Some(mask))
        } else {
            (Vec::new(), None)
        };
        let towers = spec
            .towers
            .iter()
            .enumerate()
            .map(|(t, ts)| Tower::new(&mut params, &format!("tower.{t}"), ts.clone(), spec.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            spec,
            mask,
            experts,
            gates,
            towers,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Gate mask of mixture models; `None` for shared-bottom.
    pub fn mask(&self) -> Option<&GateMask> {
        self.mask.as_ref()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn task_count(&self) -> usize {
        self.towers.len()
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    /// Parameter ids owned by expert `e`.
    pub fn expert_param_ids(&self, e: usize) -> Vec<ParamId> {
        let prefix = format!("expert.{e}.");
        (0..self.params.len())
            .map(ParamId)
            .filter(|id| self.params.names()[id.0].starts_with(&prefix))
            .collect()
    }

    pub fn expert_outputs(&self, tape: &Tape, bound: &Bound, x: &Flow) -> Result<Vec<Flow>> {
        self.experts.iter().map(|e| e.forward(tape, bound, x)).collect()
    }

    /// Gate weights of task `k` for a `B × d` input.
    pub fn gate_weights(&self, tape: &Tape, bound: &Bound, x: Var, k: usize) -> Result<Var> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract("shared-bottom models have no gates".into()))?;
        gate_forward(tape, bound[self.gates[k].0], x, &mask.row(k))
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: &Flow) -> Result<Vec<TaskOutput>> {
        let all: Vec<usize> = (0..self.task_count()).collect();
        self.forward_tasks(tape, bound, x, &all)
    }

    /// Forward pass restricted to `tasks`; experts run once and are shared.
    pub fn forward_tasks(&self, tape: &Tape, bound: &Bound, x: &Flow, tasks: &[usize]) -> Result<Vec<TaskOutput>> {
        let experts = self.expert_outputs(tape, bound, x)?;
        tasks
            .iter()
            .map(|&k| self.task_head(tape, bound, x, &experts, k))
            .collect()
    }

    fn mixed_at(&self, tape: &Tape, bound: &Bound, x: Var, experts: &[Var], k: usize) -> Result<Var> {
        if self.spec.kind.has_gates() {
            let g = self.gate_weights(tape, bound, x, k)?;
            mixture_forward(tape, g, experts)
        } else {
            Ok(experts[0])
        }
    }

    fn task_head(&self, tape: &Tape, bound: &Bound, x: &Flow, experts: &[Flow], k: usize) -> Result<TaskOutput> {
        let tower = self.towers.get(k).ok_or_else(|| Error::Contract(format!("no task {k}")))?;
        let (rows, batch, steps) = match x {
            Flow::Flat(xv) => {
                if tower.spec.temporal != Temporal::PerSequence {
                    return Err(Error::Config(format!(
                        "task {k} reads {:?} but the input has no time axis",
                        tower.spec.temporal
                    )));
                }
                let outs = experts
                    .iter()
                    .map(|f| match f {
                        Flow::Flat(v) => Ok(*v),
                        Flow::Seq(_) => Err(Error::Contract("expert returned a sequence for flat input".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch = tape.shape(*xv)[0];
                (self.mixed_at(tape, bound, *xv, &outs, k)?, batch, None)
            }
            Flow::Seq(xs) => {
                let batch = tape.shape(xs[0])[0];
                let mut picked = Vec::new();
                for t in tower.spec.steps_needed(xs.len())? {
                    let outs = experts
                        .iter()
                        .map(|f| match f {
                            Flow::Seq(s) => Ok(s[t]),
                            Flow::Flat(_) => Err(Error::Contract("expert dropped the time axis".into())),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    picked.push(self.mixed_at(tape, bound, xs[t], &outs, k)?);
                }
                let steps = (tower.spec.temporal == Temporal::PerStep).then_some(xs.len());
                let rows = if picked.len() == 1 {
                    picked[0]
                } else {
                    tape.concat_rows(&picked)?
                };
                (rows, batch, steps)
            }
        };
        Ok(TaskOutput {
            task: k,
            logits: tower.head(tape, bound, rows)?,
            batch,
            steps,
            width: tower.spec.output_dim,
        })
    }

    /// Per-expert activations, one row per sample with the time and hidden
    /// axes flattened (`step · hidden + unit`).
    pub fn expert_activations(&self, input: &BatchInput) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = input.bind(&tape);
        self.expert_outputs(&tape, &bound, &x)?
            .into_iter()
            .map(|f| match f {
                Flow::Flat(v) => Ok(tape.value(v)),
                Flow::Seq(steps) => {
                    let values: Vec<Tensor> = steps.iter().map(|&v| tape.value(v)).collect();
                    let (b, h) = (values[0].rows(), values[0].cols());
                    let mut out = Vec::with_capacity(b * h * values.len());
                    for row in 0..b {
                        for v in &values {
                            out.extend_from_slice(&v.data()[row * h..(row + 1) * h]);
                        }
                    }
                    Tensor::matrix(b, h * values.len(), out)
                }
            })
            .collect()
    }
}

/// Loss of one task output against its batch targets.
pub fn task_loss(tape: &Tape, out: &TaskOutput, spec: &TaskSpec, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Binary { values, weights, .. } => {
            tape.bce_with_logits(out.logits, values, spec.pos_weight, Some(weights))
        }
        Targets::Classes { values, weights } => tape.cross_entropy(out.logits, values, Some(weights)),
    }
}

/// A model's per-task losses on one batch.
pub struct BatchObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a Batch,
    pub tasks: &'a [TaskSpec],
}

impl crate::optim::MultiTaskObjective for BatchObjective<'_> {
    fn task_count(&self) -> usize {
        self.tasks.len()
    }

    fn task_loss(&self, tape: &Tape, bound: &Bound, task: usize) -> Result<Var> {
        let x = self.batch.input.bind(tape);
        let out = self.model.forward_tasks(tape, bound, &x, &[task])?;
        task_loss(tape, &out[0], &self.tasks[task], &self.batch.targets[task])
    }

    fn all_task_losses(&self, tape: &Tape, bound: &Bound) -> Result<Vec<Var>> {
        let x = self.batch.input.bind(tape);
        self.model
            .forward(tape, bound, &x)?
            .iter()
            .zip(self.tasks)
            .zip(&self.batch.targets)
            .map(|((out, spec), targets)| task_loss(tape, out, spec, targets))
            .collect()
    }
}

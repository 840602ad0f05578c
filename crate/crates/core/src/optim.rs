//! Optimizers, the learning-rate schedule, joint and MAML-MTL steps, and
//! epoch selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{add_grads, collect_grads, grads_are_finite, Bound, ParamSet};

/// Gradient-based parameter update with persistent state.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        check_layout(params, grads)?;
        for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= self.lr * d;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

fn check_layout(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Adam with decoupled weight decay: `θ ← θ·(1 − lr·wd)` before the moment
/// update, so decay never enters the moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Config(format!("invalid Adam settings {cfg:?}")));
        }
        if cfg.weight_decay < 0.0 || !(cfg.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {cfg:?}")));
        }
        Ok(Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        check_layout(params, grads)?;
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((x, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *x *= decay;
                *mi = beta1 * *mi + (1.0 - beta1) * d;
                *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

/// Step decay: `base · factor^⌊epoch / interval⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.001,
            factor: 0.9,
            interval: 10,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.interval.max(1)) as i32)
    }
}

/// Per-task scalar losses of a parameter set bound on a tape.
pub trait MultiTaskObjective {
    fn task_count(&self) -> usize;

    fn task_loss(&self, tape: &Tape, bound: &Bound, task: usize) -> Result<Var>;

    /// All task losses on one tape; implementors may share work across tasks.
    fn all_task_losses(&self, tape: &Tape, bound: &Bound) -> Result<Vec<Var>> {
        (0..self.task_count()).map(|k| self.task_loss(tape, bound, k)).collect()
    }
}

/// Task losses and the gradient of their sum, evaluated at `params`.
pub fn joint_gradient(obj: &dyn MultiTaskObjective, params: &ParamSet) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let losses = obj.all_task_losses(&tape, &bound)?;
    let values: Vec<f64> = losses.iter().map(|&l| tape.scalar_value(l)).collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { task: k });
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    tape.backward(total)?;
    let grads = collect_grads(&tape, &bound);
    if !grads_are_finite(&grads) {
        return Err(Error::NonFiniteLoss { task: 0 });
    }
    Ok((values, grads))
}

/// One optimizer update on `Σ_k L_k`. Returns the per-task losses before the update.
pub fn joint_step(obj: &dyn MultiTaskObjective, params: &mut ParamSet, opt: &mut dyn Optimizer) -> Result<Vec<f64>> {
    let (losses, grads) = joint_gradient(obj, params)?;
    opt.step(params, &grads)?;
    Ok(losses)
}

/// Task counts above this need an explicit override for MAML-MTL.
pub const MAML_TASK_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MamlConfig {
    /// Step size of the temporary update; defaults to the outer learning rate.
    pub inner_lr: Option<f64>,
    pub allow_many_tasks: bool,
}

fn loss_and_grad(obj: &dyn MultiTaskObjective, params: &ParamSet, task: usize) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = obj.task_loss(&tape, &bound, task)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { task });
    }
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &bound);
    if !grads_are_finite(&grads) {
        return Err(Error::NonFiniteLoss { task });
    }
    Ok((value, grads))
}

/// First-order MAML-MTL gradient visiting tasks in `order`.
///
/// Each task branches from the same `θ`: `θ'_T = θ − η·∇L_T(θ)` over every
/// parameter, and `∇L_T(θ'_T)` is accumulated. Returns the losses at `θ` and
/// the accumulated gradient; `params` is never modified.
pub fn maml_gradient_ordered(
    obj: &dyn MultiTaskObjective,
    params: &ParamSet,
    inner_lr: f64,
    order: &[usize],
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if !(inner_lr >= 0.0) {
        return Err(Error::Config(format!("inner learning rate must be >= 0, got {inner_lr}")));
    }
    let mut losses = vec![f64::NAN; obj.task_count()];
    let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for &task in order {
        let (loss, grads) = loss_and_grad(obj, params, task)?;
        losses[task] = loss;
        let temporary = params.stepped(&grads, inner_lr);
        let (_, reevaluated) = loss_and_grad(obj, &temporary, task)?;
        add_grads(&mut acc, &reevaluated);
    }
    Ok((losses, acc))
}

pub fn maml_gradient(obj: &dyn MultiTaskObjective, params: &ParamSet, inner_lr: f64) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let order: Vec<usize> = (0..obj.task_count()).collect();
    maml_gradient_ordered(obj, params, inner_lr, &order)
}

/// One MAML-MTL update routed through `opt`. Returns per-task losses at `θ`.
pub fn maml_mtl_step(
    obj: &dyn MultiTaskObjective,
    params: &mut ParamSet,
    opt: &mut dyn Optimizer,
    cfg: &MamlConfig,
) -> Result<Vec<f64>> {
    let k = obj.task_count();
    if k > MAML_TASK_LIMIT && !cfg.allow_many_tasks {
        log::warn!("MAML-MTL with {k} tasks scales poorly; set allow_many_tasks to proceed");
        return Err(Error::Config(format!(
            "MAML-MTL with {k} tasks exceeds the limit of {MAML_TASK_LIMIT} without an override"
        )));
    }
    let inner = cfg.inner_lr.unwrap_or_else(|| opt.learning_rate());
    let (losses, grads) = maml_gradient(obj, params, inner)?;
    opt.step(params, &grads)?;
    Ok(losses)
}

/// Epoch with the largest metric sum, earliest on ties. Undefined metrics
/// (`None`) are left out of the sum.
pub fn select_best(history: &[Vec<Option<f64>>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (epoch, metrics) in history.iter().enumerate() {
        let sum: f64 = metrics.iter().flatten().sum();
        if best.is_none_or(|(_, s)| sum > s) {
            best = Some((epoch, sum));
        }
    }
    best.map(|(e, _)| e)
}

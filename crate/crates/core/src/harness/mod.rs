//! Experiment runner: configuration, training and evaluation, run artifacts,
//! comparison tables and the full-model gradient check.

mod config;
mod output;
mod train;

pub use config::{DatasetConfig, ExperimentConfig, ModelChoice, ModelConfig, TrainingConfig};
pub use output::{
    compare_runs, dump_params, load_summary, parse_params, write_outputs, ComparisonRow, ComparisonTable, RunSummary,
    CONFIG_FILE, DIVERSITY_FILE, HISTORY_FILE, MASK_FILE, METRICS_FILE, PARAMS_FILE,
};
pub use train::{evaluate, model_diversity, run_experiment, AbortInfo, EpochRecord, RunRecord, TaskEval};

use crate::autodiff::{grad_check, GradCheck};
use crate::data::{gen_tabular_suite, gen_temporal_suite, TabularConfig, TemporalConfig};
use crate::error::Result;
use crate::gating::MaskMode;
use crate::layers::{Activation, ExpertKind};
use crate::model::{task_loss, Architecture, Model, ModelKind, ModelSpec};

/// Finite-difference check of a whole MMoEEx forward pass plus summed task
/// losses (4 experts, 3 tasks, batch of 8, α = 0.5 exclusivity). `recurrent`
/// switches from dense experts on tabular data to GRU experts on sequences.
pub fn model_grad_check(seed: u64, recurrent: bool, eps: f64) -> Result<GradCheck> {
    let bundle = if recurrent {
        let mut b = gen_temporal_suite(&TemporalConfig {
            seed,
            n: 40,
            steps: 5,
            window: 3,
            d: 4,
            labels: 3,
            ..Default::default()
        })?;
        b.tasks.truncate(3);
        b.labels.truncate(3);
        b
    } else {
        gen_tabular_suite(&TabularConfig {
            seed,
            n: 100,
            d: 6,
            ..Default::default()
        })?
    };
    let arch = Architecture {
        experts: 4,
        expert_kind: if recurrent { ExpertKind::Gru } else { ExpertKind::Dense },
        expert_hidden: 5,
        expert_activation: Activation::Tanh,
        tower_hidden: vec![4],
        tower_activation: Activation::Tanh,
        mask_mode: MaskMode::Exclusivity,
        alpha: 0.5,
    };
    let spec = ModelSpec::for_tasks(ModelKind::Mmoeex, bundle.input_dim(), &arch, &bundle.tasks, seed);
    let model = Model::new(spec)?;
    let batch = bundle.batch(&bundle.splits.train[..8]);
    grad_check(model.params().tensors(), eps, |tape, bound| {
        let outs = model.forward(tape, bound, &batch.input.bind(tape))?;
        let mut total = None;
        for (out, (spec, targets)) in outs.iter().zip(bundle.tasks.iter().zip(&batch.targets)) {
            let l = task_loss(tape, out, spec, targets)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total.expect("at least one task"))
    })
}

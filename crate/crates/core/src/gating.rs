//! Per-task softmax gates, the exclusivity / exclusion connectivity mask, and
//! the gated expert mixture.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Rejection-resampling budget for masks that starve a task or kill an expert.
pub const MAX_MASK_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    /// Selected experts connect to exactly one task.
    Exclusivity,
    /// Selected experts lose exactly one task connection.
    Exclusion,
}

/// Binary task × expert connectivity. `matrix[k][e] == 1` means expert `e`
/// feeds task `k`'s gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMask {
    pub mode: MaskMode,
    pub alpha: f64,
    pub seed: u64,
    pub matrix: Vec<Vec<u8>>,
}

/// Number of experts touched by the mask: `round(α·E)`, halves rounded up.
pub fn selected_count(alpha: f64, experts: usize) -> usize {
    (alpha * experts as f64 + 0.5).floor() as usize
}

impl GateMask {
    pub fn full(tasks: usize, experts: usize) -> Self {
        GateMask {
            mode: MaskMode::None,
            alpha: 0.0,
            seed: 0,
            matrix: vec![vec![1; experts]; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.matrix.len()
    }

    pub fn experts(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    pub fn row(&self, task: usize) -> Vec<bool> {
        self.matrix[task].iter().map(|&v| v == 1).collect()
    }

    pub fn is_full(&self) -> bool {
        self.matrix.iter().flatten().all(|&v| v == 1)
    }

    pub fn column_degree(&self, expert: usize) -> usize {
        self.matrix.iter().map(|r| usize::from(r[expert])).sum()
    }

    /// Experts whose connectivity was altered by the mechanism.
    pub fn modified_experts(&self) -> Vec<usize> {
        (0..self.experts())
            .filter(|&e| self.column_degree(e) < self.tasks())
            .collect()
    }

    /// Task an expert is exclusive to, if it feeds exactly one task.
    pub fn exclusive_task(&self, expert: usize) -> Option<usize> {
        if self.column_degree(expert) == 1 {
            self.matrix.iter().position(|r| r[expert] == 1)
        } else {
            None
        }
    }

    fn starved_task(&self) -> Option<usize> {
        self.matrix.iter().position(|r| r.iter().all(|&v| v == 0))
    }

    fn dead_expert(&self) -> Option<usize> {
        (0..self.experts()).find(|&e| self.column_degree(e) == 0)
    }

    /// Checks shape and the no-starved-task / no-dead-expert invariants.
    pub fn validate(&self) -> Result<()> {
        let e = self.experts();
        if self.matrix.is_empty() || e == 0 || self.matrix.iter().any(|r| r.len() != e) {
            return Err(Error::Config("gate mask must be a non-empty rectangle".into()));
        }
        if self.matrix.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Config("gate mask entries must be 0 or 1".into()));
        }
        if let Some(k) = self.starved_task() {
            return Err(Error::Config(format!("task {k} has no admissible expert")));
        }
        if let Some(x) = self.dead_expert() {
            return Err(Error::Config(format!("expert {x} feeds no task")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mask: GateMask = serde_json::from_str(text)?;
        mask.validate()?;
        Ok(mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        GateMask::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Builds a frozen connectivity mask for `tasks × experts`.
///
/// `round(α·E)` experts are drawn uniformly without replacement. Under
/// exclusivity each keeps a single uniformly drawn task; under exclusion each
/// drops a single uniformly drawn task. Draws that leave a task without any
/// expert (or an expert without any task) are rejected and redrawn from the
/// same stream, up to [`MAX_MASK_ATTEMPTS`] times.
pub fn build_mask(tasks: usize, experts: usize, alpha: f64, mode: MaskMode, seed: u64) -> Result<GateMask> {
    if tasks == 0 || experts == 0 {
        return Err(Error::Config(format!(
            "mask needs at least one task and one expert (got {tasks}×{experts})"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let chosen = selected_count(alpha, experts);
    if mode == MaskMode::None || chosen == 0 {
        return Ok(GateMask {
            mode,
            alpha,
            seed,
            ..GateMask::full(tasks, experts)
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_MASK_ATTEMPTS {
        let mut matrix = vec![vec![1u8; experts]; tasks];
        for e in sample(&mut rng, experts, chosen).into_iter() {
            let task = rng.random_range(0..tasks);
            match mode {
                MaskMode::Exclusivity => {
                    for (k, row) in matrix.iter_mut().enumerate() {
                        row[e] = u8::from(k == task);
                    }
                }
                MaskMode::Exclusion => matrix[task][e] = 0,
                MaskMode::None => unreachable!(),
            }
        }
        let mask = GateMask {
            mode,
            alpha,
            seed,
            matrix,
        };
        if mask.starved_task().is_none() && mask.dead_expert().is_none() {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "no valid {mode:?} mask for {tasks} tasks, {experts} experts, alpha {alpha} after {MAX_MASK_ATTEMPTS} attempts"
    )))
}

/// `softmax(x · Wᵀ)` over the experts admitted by `admissible`, with closed
/// experts receiving exactly zero weight. `weight` is `E × d`, `x` is `B × d`.
pub fn gate_forward(tape: &Tape, weight: Var, x: Var, admissible: &[bool]) -> Result<Var> {
    let logits = tape.matmul_nt(x, weight)?;
    if admissible.iter().all(|&a| a) {
        if admissible.len() != tape.shape(logits)[1] {
            return Err(Error::shape("gate mask", &tape.shape(logits), &[admissible.len()]));
        }
        return tape.softmax(logits);
    }
    if !admissible.iter().any(|&a| a) {
        return Err(Error::Config("gate row closes every expert".into()));
    }
    let masked = tape.mask_cols(logits, admissible)?;
    tape.softmax(masked)
}

/// `Σ_e g[:, e] · f_e` per sample.
pub fn mixture_forward(tape: &Tape, gates: Var, experts: &[Var]) -> Result<Var> {
    tape.mix(gates, experts)
}

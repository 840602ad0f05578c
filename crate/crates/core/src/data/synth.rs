//! Seeded synthetic task suites. Each generator is a pure function of its
//! config: identical configs give bitwise-identical bundles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Features, LossKind, MetricKind, Splits, TaskKind, TaskLabels, TaskSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::Temporal;
use crate::params::derive_seed;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Marks the `positives` highest scores with 1, breaking ties by index.
fn top_k_labels(scores: &[f64], positives: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![0.0; scores.len()];
    for &i in order.iter().take(positives) {
        labels[i] = 1.0;
    }
    labels
}

/// Assigns `classes` roughly equal-frequency buckets by score rank.
fn rank_buckets(scores: &[f64], classes: usize) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (rank * classes / n) as f64;
    }
    out
}

fn positives_for(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).min(n)
}

/// Census-shaped suite: `K` related binary tasks on tabular features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub tasks: usize,
    /// Task relatedness: weight on the shared latent factor.
    pub rho: f64,
    /// Std of task-private label noise.
    pub noise: f64,
    /// Fraction of positive labels per task.
    pub positive_rate: f64,
    /// Perturbation of each task's shared-factor direction around a common one;
    /// zero makes every task read the shared factor identically.
    pub weight_spread: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            seed: 0,
            n: 5000,
            d: 16,
            tasks: 3,
            rho: 0.7,
            noise: 0.5,
            positive_rate: 0.5,
            weight_spread: 0.3,
            train_fraction: 0.66,
            val_fraction: 0.17,
        }
    }
}

/// Latent-factor tabular suite. Features are `[z, u]` with the shared factor
/// `z` in the first half of the coordinates and task-private factors `u_k`
/// carved out of the rest. Task `k` is positive for the highest values of
/// `ρ·w_kᵀz + (1−ρ)·(v_kᵀu_k + noise·ε_k)`.
pub fn gen_tabular_suite(cfg: &TabularConfig) -> Result<DatasetBundle> {
    if cfg.d < 2 {
        return Err(Error::Config(format!("tabular suite needs d >= 2, got {}", cfg.d)));
    }
    if cfg.n < 100 {
        return Err(Error::Config(format!("tabular suite needs n >= 100, got {}", cfg.n)));
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1], got {}", cfg.rho)));
    }
    if cfg.tasks == 0 || !(0.0..=1.0).contains(&cfg.positive_rate) {
        return Err(Error::Config("tabular suite needs tasks >= 1 and a rate in [0, 1]".into()));
    }
    let (n, d, k) = (cfg.n, cfg.d, cfg.tasks);
    let shared_dim = (d / 2).max(1);
    let private_dim = d - shared_dim;
    let slice = |task: usize| -> Vec<usize> {
        if private_dim >= k {
            let w = private_dim / k;
            (shared_dim + task * w..shared_dim + (task + 1) * w).collect()
        } else {
            vec![shared_dim + task % private_dim]
        }
    };

    let mut wrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tabular.weights"));
    let base = unit_vector(&mut wrng, shared_dim);
    let mut shared_w = Vec::with_capacity(k);
    let mut private_v = Vec::with_capacity(k);
    for task in 0..k {
        let jitter: Vec<f64> = (0..shared_dim).map(|_| normal(&mut wrng)).collect();
        shared_w.push(normalized(
            base.iter()
                .zip(&jitter)
                .map(|(b, j)| b + cfg.weight_spread * j / (shared_dim as f64).sqrt())
                .collect(),
        ));
        private_v.push(unit_vector(&mut wrng, slice(task).len()));
    }

    let mut xrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tabular.features"));
    let x: Vec<f64> = (0..n * d).map(|_| normal(&mut xrng)).collect();
    let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tabular.noise"));

    let positives = positives_for(cfg.positive_rate, n);
    let mut labels = Vec::with_capacity(k);
    for task in 0..k {
        let idx = slice(task);
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let row = &x[i * d..(i + 1) * d];
                let shared = dot(&shared_w[task], &row[..shared_dim]);
                let private: f64 = idx.iter().zip(&private_v[task]).map(|(&j, v)| v * row[j]).sum();
                let eps = normal(&mut nrng);
                cfg.rho * shared + (1.0 - cfg.rho) * (private + cfg.noise * eps)
            })
            .collect();
        labels.push(TaskLabels {
            width: 1,
            values: top_k_labels(&scores, positives),
            observed: vec![true; n],
        });
    }

    let names = ["income", "marital", "education"];
    let tasks = (0..k)
        .map(|t| {
            let name = if k == names.len() { names[t].to_string() } else { format!("task{t}") };
            TaskSpec::binary(&name, 1.0)
        })
        .collect();
    let bundle = DatasetBundle {
        features: Features::Tabular(Tensor::matrix(n, d, x)?),
        tasks,
        labels,
        splits: Splits::shuffled(n, cfg.train_fraction, cfg.val_fraction, derive_seed(cfg.seed, "tabular.split"))?,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// ICU-shaped heterogeneous temporal suite with four tasks: per-step binary,
/// per-step multiclass, binary read at a fixed early step, and a per-sequence
/// multilabel target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub seed: u64,
    pub n: usize,
    pub steps: usize,
    pub d: usize,
    /// Step count read by the early-window task.
    pub window: usize,
    pub classes: usize,
    pub labels: usize,
    pub latent_dim: usize,
    /// AR(1) coefficient of the latent state.
    pub persistence: f64,
    /// Std of label noise; zero makes labels a deterministic function of the walk.
    pub noise: f64,
    /// Std of the feature observation noise.
    pub observation_noise: f64,
    pub per_step_rate: f64,
    pub window_rate: f64,
    pub multilabel_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            seed: 0,
            n: 2000,
            steps: 16,
            d: 8,
            window: 8,
            classes: 10,
            labels: 6,
            latent_dim: 4,
            persistence: 0.85,
            noise: 0.3,
            observation_noise: 0.1,
            per_step_rate: 0.15,
            window_rate: 0.2,
            multilabel_rate: 0.25,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

/// Latent trajectories behind a temporal bundle, kept for oracle tests.
#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct TemporalLatent {
    /// `N × T × m`.
    pub states: Vec<f64>,
    pub per_step_direction: Vec<f64>,
}

pub fn gen_temporal_suite(cfg: &TemporalConfig) -> Result<DatasetBundle> {
    gen_temporal_with_latent(cfg).map(|(b, _)| b)
}

pub(crate) fn gen_temporal_with_latent(cfg: &TemporalConfig) -> Result<(DatasetBundle, TemporalLatent)> {
    if cfg.window == 0 || cfg.steps < cfg.window {
        return Err(Error::Config(format!(
            "temporal suite needs 1 <= window <= steps (window {}, steps {})",
            cfg.window, cfg.steps
        )));
    }
    if cfg.n == 0 || cfg.d == 0 || cfg.latent_dim == 0 || cfg.classes < 2 || cfg.labels == 0 {
        return Err(Error::Config("temporal suite dimensions must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.persistence) {
        return Err(Error::Config("persistence must lie in [0, 1)".into()));
    }
    let (n, t, d, m) = (cfg.n, cfg.steps, cfg.d, cfg.latent_dim);

    let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "temporal.projection"));
    let projection: Vec<f64> = (0..d * m).map(|_| normal(&mut prng) / (m as f64).sqrt()).collect();
    let per_step_dir = unit_vector(&mut prng, m);
    let class_dir = unit_vector(&mut prng, m);
    let window_dir = unit_vector(&mut prng, m);
    let label_dirs: Vec<Vec<f64>> = (0..cfg.labels).map(|_| unit_vector(&mut prng, m)).collect();

    let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "temporal.states"));
    let innovation = (1.0 - cfg.persistence * cfg.persistence).sqrt();
    let mut states = vec![0.0; n * t * m];
    for i in 0..n {
        for s in 0..t {
            for j in 0..m {
                let eta = normal(&mut srng);
                let idx = (i * t + s) * m + j;
                states[idx] = if s == 0 {
                    eta
                } else {
                    cfg.persistence * states[idx - m] + innovation * eta
                };
            }
        }
    }

    let mut xrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "temporal.features"));
    let mut features = vec![0.0; n * t * d];
    for row in 0..n * t {
        let s = &states[row * m..(row + 1) * m];
        for c in 0..d {
            features[row * d + c] =
                dot(&projection[c * m..(c + 1) * m], s) + cfg.observation_noise * normal(&mut xrng);
        }
    }

    let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "temporal.noise"));
    let mut noisy = |score: f64| score + cfg.noise * normal(&mut nrng);
    let state = |i: usize, s: usize| &states[(i * t + s) * m..(i * t + s + 1) * m];

    let step_scores: Vec<f64> = (0..n * t).map(|r| noisy(dot(&per_step_dir, state(r / t, r % t)))).collect();
    let per_step = top_k_labels(&step_scores, positives_for(cfg.per_step_rate, n * t));

    let class_scores: Vec<f64> = (0..n * t).map(|r| noisy(dot(&class_dir, state(r / t, r % t)))).collect();
    let classes = rank_buckets(&class_scores, cfg.classes);

    let mean_state = |i: usize, upto: usize| -> Vec<f64> {
        let mut acc = vec![0.0; m];
        for s in 0..upto {
            for (a, v) in acc.iter_mut().zip(state(i, s)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / upto as f64).collect()
    };
    let window_scores: Vec<f64> = (0..n).map(|i| noisy(dot(&window_dir, &mean_state(i, cfg.window)))).collect();
    let window = top_k_labels(&window_scores, positives_for(cfg.window_rate, n));

    let means: Vec<Vec<f64>> = (0..n).map(|i| mean_state(i, t)).collect();
    let mut multilabel = vec![0.0; n * cfg.labels];
    for (l, dir) in label_dirs.iter().enumerate() {
        let scores: Vec<f64> = means.iter().map(|mu| noisy(dot(dir, mu))).collect();
        for (i, v) in top_k_labels(&scores, positives_for(cfg.multilabel_rate, n)).into_iter().enumerate() {
            multilabel[i * cfg.labels + l] = v;
        }
    }

    let tasks = vec![
        TaskSpec {
            name: "decomp".into(),
            kind: TaskKind::Binary,
            temporal: Temporal::PerStep,
            loss: LossKind::Bce,
            pos_weight: 25.0,
            metric: MetricKind::Auc,
        },
        TaskSpec {
            name: "los".into(),
            kind: TaskKind::Multiclass(cfg.classes),
            temporal: Temporal::PerStep,
            loss: LossKind::CrossEntropy,
            pos_weight: 1.0,
            metric: MetricKind::Kappa,
        },
        TaskSpec {
            name: "ihm".into(),
            kind: TaskKind::Binary,
            temporal: Temporal::FirstSteps(cfg.window),
            loss: LossKind::Bce,
            pos_weight: 5.0,
            metric: MetricKind::Auc,
        },
        TaskSpec {
            name: "pheno".into(),
            kind: TaskKind::Multilabel(cfg.labels),
            temporal: Temporal::PerSequence,
            loss: LossKind::Bce,
            pos_weight: 5.0,
            metric: MetricKind::Auc,
        },
    ];
    let labels = vec![
        TaskLabels {
            width: t,
            values: per_step,
            observed: vec![true; n],
        },
        TaskLabels {
            width: t,
            values: classes,
            observed: vec![true; n],
        },
        TaskLabels {
            width: 1,
            values: window,
            observed: vec![true; n],
        },
        TaskLabels {
            width: cfg.labels,
            values: multilabel,
            observed: vec![true; n],
        },
    ];
    let bundle = DatasetBundle {
        features: Features::Sequential(Tensor::new(vec![n, t, d], features)?),
        tasks,
        labels,
        splits: Splits::shuffled(n, cfg.train_fraction, cfg.val_fraction, derive_seed(cfg.seed, "temporal.split"))?,
    };
    bundle.validate()?;
    Ok((
        bundle,
        TemporalLatent {
            states,
            per_step_direction: per_step_dir,
        },
    ))
}

/// Assay-shaped suite: many sparse, heavily imbalanced binary tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManyTaskConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub tasks: usize,
    pub latent_dim: usize,
    pub min_rate: f64,
    pub max_rate: f64,
    /// Probability that a (sample, task) label is missing.
    pub missing_rate: f64,
    pub noise: f64,
    pub pos_weight: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for ManyTaskConfig {
    fn default() -> Self {
        ManyTaskConfig {
            seed: 0,
            n: 20000,
            d: 32,
            tasks: 16,
            latent_dim: 4,
            min_rate: 0.005,
            max_rate: 0.05,
            missing_rate: 0.0,
            noise: 0.5,
            pos_weight: 100.0,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

pub fn gen_manytask_suite(cfg: &ManyTaskConfig) -> Result<DatasetBundle> {
    if cfg.tasks < 2 {
        return Err(Error::Config(format!("many-task suite needs at least 2 tasks, got {}", cfg.tasks)));
    }
    if cfg.n == 0 || cfg.d == 0 || cfg.latent_dim == 0 {
        return Err(Error::Config("many-task suite dimensions must be positive".into()));
    }
    if !(0.0 <= cfg.min_rate && cfg.min_rate <= cfg.max_rate && cfg.max_rate <= 1.0) {
        return Err(Error::Config("positive-rate band must satisfy 0 <= min <= max <= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
    }
    let (n, d, k, m) = (cfg.n, cfg.d, cfg.tasks, cfg.latent_dim);
    let mut wrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "manytask.weights"));
    let projection: Vec<f64> = (0..d * m).map(|_| normal(&mut wrng) / (m as f64).sqrt()).collect();
    let base = unit_vector(&mut wrng, m);
    let dirs: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let jitter: Vec<f64> = (0..m).map(|_| normal(&mut wrng)).collect();
            normalized(base.iter().zip(&jitter).map(|(b, j)| b + 0.5 * j / (m as f64).sqrt()).collect())
        })
        .collect();
    let lo = (cfg.min_rate * n as f64).ceil() as usize;
    let hi = ((cfg.max_rate * n as f64).floor() as usize).max(lo);
    let counts: Vec<usize> = (0..k)
        .map(|_| positives_for(wrng.random_range(cfg.min_rate..=cfg.max_rate), n).clamp(lo, hi))
        .collect();

    let mut zrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "manytask.latent"));
    let z: Vec<f64> = (0..n * m).map(|_| normal(&mut zrng)).collect();
    let mut features = vec![0.0; n * d];
    for i in 0..n {
        let zi = &z[i * m..(i + 1) * m];
        for c in 0..d {
            features[i * d + c] = dot(&projection[c * m..(c + 1) * m], zi) + 0.3 * normal(&mut zrng);
        }
    }

    let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "manytask.noise"));
    let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "manytask.missing"));
    let labels = (0..k)
        .map(|task| {
            let scores: Vec<f64> = (0..n)
                .map(|i| dot(&dirs[task], &z[i * m..(i + 1) * m]) + cfg.noise * normal(&mut nrng))
                .collect();
            let mut values = top_k_labels(&scores, counts[task]);
            let observed: Vec<bool> = (0..n).map(|_| mrng.random::<f64>() >= cfg.missing_rate).collect();
            for (v, &o) in values.iter_mut().zip(&observed) {
                if !o {
                    *v = 0.0;
                }
            }
            TaskLabels {
                width: 1,
                values,
                observed,
            }
        })
        .collect();
    let tasks = (0..k)
        .map(|t| TaskSpec::binary(&format!("assay{t}"), cfg.pos_weight))
        .collect();
    let bundle = DatasetBundle {
        features: Features::Tabular(Tensor::matrix(n, d, features)?),
        tasks,
        labels,
        splits: Splits::shuffled(n, cfg.train_fraction, cfg.val_fraction, derive_seed(cfg.seed, "manytask.split"))?,
    };
    bundle.validate()?;
    Ok(bundle)
}

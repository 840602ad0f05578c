//! Evaluation metrics and comparison statistics.

use serde::{Deserialize, Serialize};

use crate::data::MetricKind;
use crate::error::{Error, Result};

/// ROC AUC via the Mann-Whitney U statistic with midranks for ties.
///
/// Equals `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` over all positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "roc_auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain(format!("roc_auc: label {bad} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("roc_auc: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                pos_rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Cohen's kappa between predicted and true class vectors.
///
/// When chance agreement is 1 (both sides a single identical class) the
/// statistic is undefined; it is reported as 0 with a warning.
pub fn cohen_kappa(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "cohen_kappa: {} predictions but {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("kappa of an empty sample".into()));
    }
    let classes = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let n = pred.len() as f64;
    let mut pred_counts = vec![0usize; classes];
    let mut true_counts = vec![0usize; classes];
    let mut agree = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        pred_counts[p] += 1;
        true_counts[t] += 1;
        agree += usize::from(p == t);
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = pred_counts
        .iter()
        .zip(&true_counts)
        .map(|(&a, &b)| (a as f64 / n) * (b as f64 / n))
        .sum();
    if p_e >= 1.0 {
        log::warn!("cohen_kappa: chance agreement is 1, reporting 0");
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn check_pair(stl: &[f64], mtl: &[f64]) -> Result<()> {
    if stl.len() != mtl.len() || stl.is_empty() {
        return Err(Error::Contract(format!(
            "comparison needs matching non-empty task sets ({} vs {})",
            stl.len(),
            mtl.len()
        )));
    }
    Ok(())
}

/// Average relative improvement of `mtl` over `stl`, in percent.
pub fn delta_improvement(stl: &[f64], mtl: &[f64]) -> Result<f64> {
    check_pair(stl, mtl)?;
    if let Some(bad) = stl.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("delta_improvement: baseline value {bad} must be > 0")));
    }
    let k = stl.len() as f64;
    Ok(stl.iter().zip(mtl).map(|(s, m)| (m - s) / s).sum::<f64>() / k * 100.0)
}

/// Number of tasks where `mtl` is strictly below `stl`.
pub fn negative_transfer(stl: &[f64], mtl: &[f64]) -> Result<usize> {
    check_pair(stl, mtl)?;
    Ok(stl.iter().zip(mtl).filter(|(s, m)| m < s).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
    pub samples: usize,
}

impl TaskResult {
    pub fn new(task: &str, metric: MetricKind, value: f64, samples: usize) -> Result<Self> {
        let ok = match metric {
            MetricKind::Auc => (0.0..=1.0).contains(&value),
            MetricKind::Kappa => (-1.0..=1.0).contains(&value),
        };
        if !ok {
            return Err(Error::Domain(format!("{metric:?} value {value} out of range for task {task}")));
        }
        Ok(TaskResult {
            task: task.to_string(),
            metric,
            value,
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tasks: Vec<String>,
    pub stl: Vec<f64>,
    pub mtl: Vec<f64>,
    pub delta: f64,
    pub nt_count: usize,
}

impl ComparisonReport {
    pub fn new(tasks: &[String], stl: &[f64], mtl: &[f64]) -> Result<Self> {
        if tasks.len() != stl.len() {
            return Err(Error::Contract("task names do not match the value vectors".into()));
        }
        Ok(ComparisonReport {
            tasks: tasks.to_vec(),
            stl: stl.to_vec(),
            mtl: mtl.to_vec(),
            delta: delta_improvement(stl, mtl)?,
            nt_count: negative_transfer(stl, mtl)?,
        })
    }
}

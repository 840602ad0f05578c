//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over all entries of `|g_ad − g_fd| / max(1, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.with_value(out, |t| {
        if t.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar output, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.item())
    })
}

/// Compares reverse-mode gradients of `f` with central differences at step `eps`.
///
/// `f` receives one leaf per entry of `params` and must return a scalar node.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if tape.with_value(out, Tensor::len) != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for pi in 0..params.len() {
        let mut fd = Tensor::zeros(params[pi].shape());
        for ei in 0..params[pi].len() {
            let original = work[pi].data()[ei];
            work[pi].data_mut()[ei] = original + eps;
            let plus = evaluate(&work, &f)?;
            work[pi].data_mut()[ei] = original - eps;
            let minus = evaluate(&work, &f)?;
            work[pi].data_mut()[ei] = original;
            let g_fd = (plus - minus) / (2.0 * eps);
            let g_ad = analytic[pi].data()[ei];
            fd.data_mut()[ei] = g_fd;
            let err = (g_ad - g_fd).abs() / 1f64.max(g_ad.abs() + g_fd.abs());
            if err > max_rel_error {
                max_rel_error = err;
                worst = (pi, ei);
            }
        }
        numeric.push(fd);
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

//! Finite-difference checks for every primitive on random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor, Var};
use crate::error::Result;

/// Worst relative error observed for one primitive across all instances.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Random values kept at least `gap` away from zero so ReLU kinks stay outside
/// the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    random(rng, shape).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces a tensor to a scalar through a fixed random linear functional so
/// every output entry receives a distinct upstream gradient.
fn project(tape: &Tape, x: Var, w: &Tensor) -> Result<Var> {
    let shaped = w.clone().reshape(tape.shape(x))?;
    let wv = tape.leaf(shaped);
    let prod = tape.mul(x, wv)?;
    Ok(tape.sum(prod))
}

type Case = fn(&mut ChaCha8Rng, f64) -> Result<f64>;

fn case_matmul(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[3, 4]), random(rng, &[4, 2])];
    let w = weights(rng, 6);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_matmul_nt(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[3, 4]), random(rng, &[5, 4])];
    let w = weights(rng, 15);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_add(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[2, 3]), random(rng, &[2, 3])];
    let w = weights(rng, 6);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_sub(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[2, 3]), random(rng, &[2, 3])];
    let w = weights(rng, 6);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_mul(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[2, 3]), random(rng, &[2, 3])];
    let w = weights(rng, 6);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_add_row(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[4, 3]), random(rng, &[1, 3])];
    let w = weights(rng, 12);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_relu(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [away_from_zero(rng, &[3, 3], 0.01)];
    let w = weights(rng, 9);
    Ok(grad_check(&params, eps, |t, v| project(t, t.relu(v[0]), &w))?.max_rel_error)
}

fn case_sigmoid(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[3, 3])];
    let w = weights(rng, 9);
    Ok(grad_check(&params, eps, |t, v| project(t, t.sigmoid(v[0]), &w))?.max_rel_error)
}

fn case_tanh(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[3, 3])];
    let w = weights(rng, 9);
    Ok(grad_check(&params, eps, |t, v| project(t, t.tanh(v[0]), &w))?.max_rel_error)
}

fn case_scale_shift(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[2, 2])];
    let w = weights(rng, 4);
    let c = rng.random_range(-2.0..2.0);
    Ok(grad_check(&params, eps, |t, v| {
        let y = t.add_scalar(t.scale(v[0], c), 0.5);
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_softmax(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[3, 4])];
    let w = weights(rng, 12);
    let keep = [true, false, true, true];
    Ok(grad_check(&params, eps, |t, v| {
        let masked = t.mask_cols(v[0], &keep)?;
        let y = t.softmax(masked)?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_mix(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [
        random(rng, &[3, 3]),
        random(rng, &[3, 2]),
        random(rng, &[3, 2]),
        random(rng, &[3, 2]),
    ];
    let w = weights(rng, 6);
    Ok(grad_check(&params, eps, |t, v| {
        let gates = t.softmax(v[0])?;
        let y = t.mix(gates, &v[1..])?;
        project(t, y, &w)
    })?
    .max_rel_error)
}

fn case_concat(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[2, 3]), random(rng, &[1, 3]), random(rng, &[3, 2])];
    let w = weights(rng, 15);
    Ok(grad_check(&params, eps, |t, v| {
        let rows = t.concat_rows(&v[..2])?;
        let cols = t.concat_cols(&[rows, v[2]])?;
        project(t, cols, &w)
    })?
    .max_rel_error)
}

fn case_mean(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[3, 2])];
    Ok(grad_check(&params, eps, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.mean(sq))
    })?
    .max_rel_error)
}

fn case_bce(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[6, 1]).map(|v| 3.0 * v)];
    let targets: Vec<f64> = (0..6).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let mask: Vec<f64> = (0..6).map(|i| if i == 2 { 0.0 } else { 1.0 }).collect();
    let pos_weight = rng.random_range(0.5..30.0);
    Ok(grad_check(&params, eps, |t, v| {
        t.bce_with_logits(v[0], &targets, pos_weight, Some(&mask))
    })?
    .max_rel_error)
}

fn case_cross_entropy(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let params = [random(rng, &[4, 5]).map(|v| 2.0 * v)];
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    Ok(grad_check(&params, eps, |t, v| t.cross_entropy(v[0], &targets, None))?.max_rel_error)
}

const CASES: &[(&str, Case)] = &[
    ("matmul", case_matmul),
    ("matmul_nt", case_matmul_nt),
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("add_row", case_add_row),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("tanh", case_tanh),
    ("scale+add_scalar", case_scale_shift),
    ("mask_cols+softmax", case_softmax),
    ("mix", case_mix),
    ("concat_rows+concat_cols", case_concat),
    ("mean", case_mean),
    ("bce_with_logits", case_bce),
    ("cross_entropy", case_cross_entropy),
];

/// Runs every primitive's check on `instances` random draws.
pub fn check_primitives(seed: u64, instances: usize, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CASES
        .iter()
        .map(|&(name, case)| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(case(&mut rng, eps)?);
            }
            Ok(PrimitiveCheck {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

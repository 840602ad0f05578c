//! Expert networks (dense, vanilla RNN, GRU) and per-task tower heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Values flowing between blocks: one matrix per batch, or one per time step.
#[derive(Debug, Clone)]
pub enum Flow {
    Flat(Var),
    Seq(Vec<Var>),
}

impl Flow {
    pub fn steps(&self) -> Option<usize> {
        match self {
            Flow::Flat(_) => None,
            Flow::Seq(s) => Some(s.len()),
        }
    }
}

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let weight = params.push_uniform(&format!("{name}.weight"), &[input_dim, output_dim], input_dim, seed);
        let bias = params.push_zeros(&format!("{name}.bias"), &[1, output_dim]);
        Linear {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound[self.weight.0])?;
        tape.add_row(xw, bound[self.bias.0])
    }

    pub fn param_count(input_dim: usize, output_dim: usize) -> usize {
        input_dim * output_dim + output_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Dense,
    Rnn,
    Gru,
}

impl ExpertKind {
    pub fn is_recurrent(self) -> bool {
        !matches!(self, ExpertKind::Dense)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Output activation of dense experts. Recurrent cells use their fixed nonlinearities.
    pub activation: Activation,
}

impl ExpertSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config(format!(
                "expert dimensions must be positive (input {}, hidden {})",
                self.input_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden_dim);
        match self.kind {
            ExpertKind::Dense => Linear::param_count(d, h),
            ExpertKind::Rnn => Linear::param_count(d, h) + h * h,
            ExpertKind::Gru => 3 * (Linear::param_count(d, h) + Linear::param_count(h, h)),
        }
    }
}

#[derive(Debug, Clone)]
enum Cell {
    Dense(Linear),
    Rnn {
        input: Linear,
        recurrent: ParamId,
    },
    /// Update, reset and candidate gates, each with input and hidden biases.
    Gru {
        input: [Linear; 3],
        hidden: [Linear; 3],
    },
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub spec: ExpertSpec,
    cell: Cell,
}

impl Expert {
    pub fn new(params: &mut ParamSet, name: &str, spec: ExpertSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (d, h) = (spec.input_dim, spec.hidden_dim);
        let cell = match spec.kind {
            ExpertKind::Dense => Cell::Dense(Linear::new(params, &format!("{name}.dense"), d, h, seed)),
            ExpertKind::Rnn => Cell::Rnn {
                input: Linear::new(params, &format!("{name}.input"), d, h, seed),
                recurrent: params.push_uniform(&format!("{name}.recurrent"), &[h, h], h, seed),
            },
            ExpertKind::Gru => {
                let lin = |params: &mut ParamSet, part: &str, fan: usize| {
                    Linear::new(params, &format!("{name}.{part}"), fan, h, seed)
                };
                Cell::Gru {
                    input: [lin(params, "input_z", d), lin(params, "input_r", d), lin(params, "input_n", d)],
                    hidden: [
                        lin(params, "hidden_z", h),
                        lin(params, "hidden_r", h),
                        lin(params, "hidden_n", h),
                    ],
                }
            }
        };
        Ok(Expert { spec, cell })
    }

    /// Dense experts map each row (or each step independently); recurrent experts
    /// require a sequence and emit the hidden state at every step, starting from
    /// a zero state.
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: &Flow) -> Result<Flow> {
        match (&self.cell, x) {
            (Cell::Dense(lin), Flow::Flat(v)) => Ok(Flow::Flat(self.dense(tape, bound, lin, *v)?)),
            (Cell::Dense(lin), Flow::Seq(steps)) => Ok(Flow::Seq(
                steps
                    .iter()
                    .map(|&v| self.dense(tape, bound, lin, v))
                    .collect::<Result<_>>()?,
            )),
            (_, Flow::Flat(v)) => Err(Error::shape("recurrent expert input", &tape.shape(*v), &[0, 0, 0])),
            (Cell::Rnn { input, recurrent }, Flow::Seq(steps)) => {
                let mut h = self.zero_state(tape, steps)?;
                let mut out = Vec::with_capacity(steps.len());
                for &xt in steps {
                    let a = input.forward(tape, bound, xt)?;
                    let r = tape.matmul(h, bound[recurrent.0])?;
                    h = tape.tanh(tape.add(a, r)?);
                    out.push(h);
                }
                Ok(Flow::Seq(out))
            }
            (Cell::Gru { input, hidden }, Flow::Seq(steps)) => {
                let mut h = self.zero_state(tape, steps)?;
                let mut out = Vec::with_capacity(steps.len());
                for &xt in steps {
                    let z = tape.sigmoid(tape.add(
                        input[0].forward(tape, bound, xt)?,
                        hidden[0].forward(tape, bound, h)?,
                    )?);
                    let r = tape.sigmoid(tape.add(
                        input[1].forward(tape, bound, xt)?,
                        hidden[1].forward(tape, bound, h)?,
                    )?);
                    let hn = tape.mul(r, hidden[2].forward(tape, bound, h)?)?;
                    let n = tape.tanh(tape.add(input[2].forward(tape, bound, xt)?, hn)?);
                    // h' = (1 − z)·n + z·h = n + z·(h − n)
                    let diff = tape.sub(h, n)?;
                    h = tape.add(n, tape.mul(z, diff)?)?;
                    out.push(h);
                }
                Ok(Flow::Seq(out))
            }
        }
    }

    fn dense(&self, tape: &Tape, bound: &Bound, lin: &Linear, x: Var) -> Result<Var> {
        let y = lin.forward(tape, bound, x)?;
        Ok(self.spec.activation.apply(tape, y))
    }

    fn zero_state(&self, tape: &Tape, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Data("empty sequence".into()))?;
        let batch = tape.shape(*first)[0];
        Ok(tape.leaf(Tensor::zeros(&[batch, self.spec.hidden_dim])))
    }
}

/// Which steps of a sequence a tower reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temporal {
    /// One prediction per sample, from the last step (or the flat input).
    PerSequence,
    /// One prediction at every step.
    PerStep,
    /// One prediction per sample, read at step `window − 1`.
    FirstSteps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub task: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub temporal: Temporal,
    pub activation: Activation,
}

impl TowerSpec {
    pub fn param_count(&self) -> usize {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
    }

    /// Step indices of a length-`steps` sequence the tower consumes.
    pub fn steps_needed(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::Data("empty sequence".into()));
        }
        match self.temporal {
            Temporal::PerSequence => Ok(vec![steps - 1]),
            Temporal::PerStep => Ok((0..steps).collect()),
            Temporal::FirstSteps(w) if w == 0 => {
                Err(Error::Config("first-steps window must be at least 1".into()))
            }
            Temporal::FirstSteps(w) if w > steps => Err(Error::Data(format!(
                "sequence of {steps} steps is shorter than tower window {w}"
            ))),
            Temporal::FirstSteps(w) => Ok(vec![w - 1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tower {
    pub spec: TowerSpec,
    layers: Vec<Linear>,
}

impl Tower {
    pub fn new(params: &mut ParamSet, name: &str, spec: TowerSpec, seed: u64) -> Result<Self> {
        if spec.output_dim == 0 || spec.input_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Config(format!("tower {} has a zero-width layer", spec.task)));
        }
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.output_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.layer{i}"), w[0], w[1], seed))
            .collect();
        Ok(Tower { spec, layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Applies the MLP head to a `rows × input_dim` matrix.
    pub fn head(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let width = tape.shape(x).last().copied().unwrap_or(0);
        if width != self.spec.input_dim {
            return Err(Error::shape("tower input", &tape.shape(x), &[self.spec.input_dim]));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last {
                h = self.spec.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Tower applied to a task's mixed representation. Per-step towers return
    /// time-major rows (`step · batch + sample`).
    pub fn forward(&self, tape: &Tape, bound: &Bound, mixed: &Flow) -> Result<Var> {
        match mixed {
            Flow::Flat(x) => match self.spec.temporal {
                Temporal::PerSequence => self.head(tape, bound, *x),
                other => Err(Error::Config(format!(
                    "tower {} reads {other:?} but the input has no time axis",
                    self.spec.task
                ))),
            },
            Flow::Seq(steps) => {
                let picked: Vec<Var> = self
                    .spec
                    .steps_needed(steps.len())?
                    .into_iter()
                    .map(|t| steps[t])
                    .collect();
                let rows = if picked.len() == 1 {
                    picked[0]
                } else {
                    tape.concat_rows(&picked)?
                };
                self.head(tape, bound, rows)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_input(tape: &Tape, data: &[Vec<Vec<f64>>]) -> Flow {
        // data[t][b] -> row
        Flow::Seq(
            data.iter()
                .map(|rows| tape.leaf(Tensor::from_rows(rows).unwrap()))
                .collect(),
        )
    }

    #[test]
    fn zero_dense_expert_outputs_zero() {
        let mut p = ParamSet::new();
        let spec = ExpertSpec {
            kind: ExpertKind::Dense,
            input_dim: 3,
            hidden_dim: 4,
            activation: Activation::Relu,
        };
        let e = Expert::new(&mut p, "e", spec, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.leaf(Tensor::from_rows(&[vec![1., 2., 3.], vec![-1., 0.5, 2.]]).unwrap());
        let Flow::Flat(y) = e.forward(&tape, &b, &Flow::Flat(x)).unwrap() else { panic!() };
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_without_recurrence_is_stepwise_dense_tanh() {
        let mut p = ParamSet::new();
        let spec = ExpertSpec {
            kind: ExpertKind::Rnn,
            input_dim: 2,
            hidden_dim: 3,
            activation: Activation::Tanh,
        };
        let e = Expert::new(&mut p, "e", spec, 5).unwrap();
        let rec = p.find("e.recurrent").unwrap();
        p.get_mut(rec).data_mut().fill(0.0);
        let bias = p.find("e.input.bias").unwrap();
        p.get_mut(bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let w = p.get(p.find("e.input.weight").unwrap()).clone();

        let tape = Tape::new();
        let b = p.bind(&tape);
        let data = vec![
            vec![vec![1.0, -1.0]],
            vec![vec![0.5, 2.0]],
            vec![vec![-0.3, 0.0]],
        ];
        let Flow::Seq(out) = e.forward(&tape, &b, &seq_input(&tape, &data)).unwrap() else { panic!() };
        for (t, step) in data.iter().enumerate() {
            let got = tape.value(out[t]);
            for j in 0..3 {
                let pre = step[0][0] * w.get(0, j) + step[0][1] * w.get(1, j) + [0.1, -0.2, 0.3][j];
                assert!((got.get(0, j) - pre.tanh()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gru_single_step_matches_gate_equations() {
        let mut p = ParamSet::new();
        let spec = ExpertSpec {
            kind: ExpertKind::Gru,
            input_dim: 2,
            hidden_dim: 2,
            activation: Activation::Tanh,
        };
        let e = Expert::new(&mut p, "g", spec, 9).unwrap();
        // Give every bias a distinct value so each one is exercised.
        let mut k = 0.0;
        for name in ["input_z", "input_r", "input_n", "hidden_z", "hidden_r", "hidden_n"] {
            let id = p.find(&format!("g.{name}.bias")).unwrap();
            k += 0.05;
            p.get_mut(id).data_mut().copy_from_slice(&[k, -k]);
        }
        let get = |name: &str| p.get(p.find(&format!("g.{name}")).unwrap()).clone();
        let x = [0.7, -1.2];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // h_{-1} = 0 so hidden weights only contribute through their biases.
        let affine = |w: &Tensor, b: &Tensor, j: usize| x[0] * w.get(0, j) + x[1] * w.get(1, j) + b.data()[j];
        let mut expected = [0.0; 2];
        for j in 0..2 {
            let z = sig(affine(&get("input_z.weight"), &get("input_z.bias"), j) + get("hidden_z.bias").data()[j]);
            let r = sig(affine(&get("input_r.weight"), &get("input_r.bias"), j) + get("hidden_r.bias").data()[j]);
            let n = (affine(&get("input_n.weight"), &get("input_n.bias"), j) + r * get("hidden_n.bias").data()[j]).tanh();
            expected[j] = (1.0 - z) * n;
        }
        let tape = Tape::new();
        let b = p.bind(&tape);
        let Flow::Seq(out) = e
            .forward(&tape, &b, &seq_input(&tape, &[vec![x.to_vec()]]))
            .unwrap()
        else {
            panic!()
        };
        let got = tape.value(out[0]);
        for j in 0..2 {
            assert!((got.get(0, j) - expected[j]).abs() < 1e-14, "{j}");
        }
    }

    #[test]
    fn recurrent_expert_rejects_flat_input() {
        let mut p = ParamSet::new();
        let spec = ExpertSpec {
            kind: ExpertKind::Gru,
            input_dim: 2,
            hidden_dim: 2,
            activation: Activation::Tanh,
        };
        let e = Expert::new(&mut p, "g", spec, 0).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(e.forward(&tape, &b, &Flow::Flat(x)), Err(Error::Shape { .. })));
    }

    fn tower(temporal: Temporal, hidden: Vec<usize>, input_dim: usize, output_dim: usize) -> (ParamSet, Tower) {
        let mut p = ParamSet::new();
        let spec = TowerSpec {
            task: 0,
            input_dim,
            hidden,
            output_dim,
            temporal,
            activation: Activation::Relu,
        };
        let t = Tower::new(&mut p, "t", spec, 1).unwrap();
        (p, t)
    }

    #[test]
    fn identity_tower_passes_mixture_through() {
        let (mut p, t) = tower(Temporal::PerSequence, vec![], 3, 3);
        let w = t.layers()[0].weight;
        *p.get_mut(w) = Tensor::identity(3);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let xv = tape.leaf(x.clone());
        let y = t.forward(&tape, &b, &Flow::Flat(xv)).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn per_step_tower_emits_one_row_block_per_step() {
        let (p, t) = tower(Temporal::PerStep, vec![4], 2, 1);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let steps = seq_input(
            &tape,
            &[
                vec![vec![0.1, 0.2], vec![0.3, 0.4]],
                vec![vec![0.5, 0.6], vec![0.7, 0.8]],
                vec![vec![0.9, 1.0], vec![1.1, 1.2]],
            ],
        );
        let y = t.forward(&tape, &b, &steps).unwrap();
        assert_eq!(tape.shape(y), vec![6, 1]);
    }

    #[test]
    fn first_window_tower_reads_step_window_minus_one() {
        let (p, t) = tower(Temporal::FirstSteps(2), vec![3], 2, 1);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let data = [
            vec![vec![0.1, 0.2]],
            vec![vec![-0.5, 0.9]],
            vec![vec![2.0, 3.0]],
        ];
        let steps = seq_input(&tape, &data);
        let y = tape.value(t.forward(&tape, &b, &steps).unwrap());

        // Direct evaluation of Linear → ReLU → Linear on step 1.
        let l0 = &t.layers()[0];
        let l1 = &t.layers()[1];
        let (w0, b0) = (p.get(l0.weight), p.get(l0.bias));
        let (w1, b1) = (p.get(l1.weight), p.get(l1.bias));
        let x = &data[1][0];
        let mut out = b1.data()[0];
        for j in 0..3 {
            let h = (x[0] * w0.get(0, j) + x[1] * w0.get(1, j) + b0.data()[j]).max(0.0);
            out += h * w1.get(j, 0);
        }
        assert!((y.item() - out).abs() < 1e-15);
    }

    #[test]
    fn first_window_longer_than_sequence_is_data_error() {
        let (p, t) = tower(Temporal::FirstSteps(4), vec![], 2, 1);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let steps = seq_input(&tape, &[vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]]);
        assert!(matches!(t.forward(&tape, &b, &steps), Err(Error::Data(_))));
    }

    #[test]
    fn param_counts_match_allocation() {
        for kind in [ExpertKind::Dense, ExpertKind::Rnn, ExpertKind::Gru] {
            let mut p = ParamSet::new();
            let spec = ExpertSpec {
                kind,
                input_dim: 5,
                hidden_dim: 7,
                activation: Activation::Relu,
            };
            Expert::new(&mut p, "e", spec.clone(), 0).unwrap();
            assert_eq!(p.scalar_count(), spec.param_count(), "{kind:?}");
        }
        let (p, t) = tower(Temporal::PerSequence, vec![4, 3], 6, 2);
        assert_eq!(p.scalar_count(), t.spec.param_count());
    }
}

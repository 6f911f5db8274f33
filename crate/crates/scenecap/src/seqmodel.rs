//! Stacked LSTM units with optional scene-factorized gates, plus the MLPs
//! that initialize their states from the mean region feature.

use numcore::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::uniform;
use crate::scene::SceneVector;

/// Affine map of one LSTM gate block.
///
/// A factorized gate computes `A · diag(F s) · B · x + bias`, with `F`
/// shared model-wide and passed in as the precomputed gain `F s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gate<T> {
    Dense { weight: T, bias: T },
    Factorized { a: T, b: T, bias: T },
}

impl<T> Gate<T> {
    pub fn is_factorized(&self) -> bool {
        matches!(self, Gate::Factorized { .. })
    }

    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> Gate<U> {
        match self {
            Gate::Dense { weight, bias } => Gate::Dense {
                weight: f(weight),
                bias: f(bias),
            },
            Gate::Factorized { a, b, bias } => Gate::Factorized {
                a: f(a),
                b: f(b),
                bias: f(bias),
            },
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        match self {
            Gate::Dense { weight, bias } => {
                out.push((format!("{prefix}.weight"), weight));
                out.push((format!("{prefix}.bias"), bias));
            }
            Gate::Factorized { a, b, bias } => {
                out.push((format!("{prefix}.a"), a));
                out.push((format!("{prefix}.b"), b));
                out.push((format!("{prefix}.bias"), bias));
            }
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        match self {
            Gate::Dense { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Gate::Factorized { a, b, bias } => {
                out.push(a);
                out.push(b);
                out.push(bias);
            }
        }
    }
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "cell"];

/// Gate blocks in the order input, forget, output, candidate cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer<T> {
    pub gates: [Gate<T>; 4],
}

impl<T> LstmLayer<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> LstmLayer<U> {
        let [i, fg, o, g] = &self.gates;
        LstmLayer {
            gates: [i.map(f), fg.map(f), o.map(f), g.map(f)],
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (gate, name) in self.gates.iter().zip(GATE_NAMES) {
            gate.collect(&format!("{prefix}.{name}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for gate in &mut self.gates {
            gate.collect_mut(out);
        }
    }

    pub fn is_factorized(&self) -> bool {
        self.gates.iter().any(Gate::is_factorized)
    }
}

impl LstmLayer<Tensor> {
    /// Random layer. `factorize[j]` selects the factorized form for gate `j`
    /// with inner rank `rank`.
    pub fn random(
        rng: &mut impl Rng,
        input: usize,
        hidden: usize,
        factorize: [bool; 4],
        rank: usize,
    ) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let gates = factorize.map(|fact| {
            if fact {
                Gate::Factorized {
                    a: uniform(rng, &[hidden, rank], (3.0 / rank as f64).sqrt()),
                    b: uniform(rng, &[rank, input], (3.0 / input as f64).sqrt()),
                    bias: Tensor::zeros(&[hidden]),
                }
            } else {
                Gate::Dense {
                    weight: uniform(rng, &[hidden, input], scale),
                    bias: Tensor::zeros(&[hidden]),
                }
            }
        });
        Self { gates }
    }

    /// All-zero layer of the same structure.
    pub fn zeroed(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn hidden_size(&self) -> usize {
        match &self.gates[0] {
            Gate::Dense { bias, .. } | Gate::Factorized { bias, .. } => bias.len(),
        }
    }

    pub fn input_size(&self) -> usize {
        match &self.gates[0] {
            Gate::Dense { weight, .. } => weight.cols(),
            Gate::Factorized { b, .. } => b.cols(),
        }
    }

    /// Inner rank of the factorized gates, if any.
    pub fn rank(&self) -> Option<usize> {
        self.gates.iter().find_map(|g| match g {
            Gate::Factorized { b, .. } => Some(b.rows()),
            Gate::Dense { .. } => None,
        })
    }

    /// One LSTM update on plain values.
    ///
    /// `input` is the full concatenated layer input (it already contains the
    /// previous hidden state(s)). Returns `(h, c)`.
    pub fn step(
        &self,
        input: &[f64],
        prev_c: &[f64],
        scene: Option<(&Tensor, &SceneVector)>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.input_size() {
            return Err(Error::Dimension {
                what: "lstm input",
                expected: self.input_size(),
                actual: input.len(),
            });
        }
        if prev_c.len() != self.hidden_size() {
            return Err(Error::Dimension {
                what: "lstm cell",
                expected: self.hidden_size(),
                actual: prev_c.len(),
            });
        }
        let mut tape = Tape::new();
        let gain = match (self.is_factorized(), scene) {
            (false, _) => None,
            (true, None) => return Err(Error::MissingScene),
            (true, Some((factors, s))) => {
                let f = tape.param(factors);
                let s = tape.constant(s.to_tensor());
                Some(tape.matmul(f, s)?)
            }
        };
        let layer = self.map(&mut |t| tape.param(t));
        let x = tape.constant(Tensor::vector(input.to_vec()));
        let c = tape.constant(Tensor::vector(prev_c.to_vec()));
        let (h, c) = lstm_step(&mut tape, &layer, x, c, gain)?;
        Ok((tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
    }
}

fn gate_preactivation(tape: &mut Tape<'_>, gate: &Gate<Var>, input: Var, gain: Option<Var>) -> Result<Var> {
    let pre = match gate {
        Gate::Dense { weight, bias } => {
            let wx = tape.matmul(*weight, input)?;
            tape.add(wx, *bias)?
        }
        Gate::Factorized { a, b, bias } => {
            let gain = gain.ok_or(Error::MissingScene)?;
            let bx = tape.matmul(*b, input)?;
            let scaled = tape.mul(gain, bx)?;
            let ax = tape.matmul(*a, scaled)?;
            tape.add(ax, *bias)?
        }
    };
    Ok(pre)
}

/// Tracked LSTM update: gates `i, f, o = σ(·)`, `g = tanh(·)`,
/// `c = f ⊙ c_prev + i ⊙ g`, `h = o ⊙ tanh(c)`.
///
/// `gain` is `F s`; it is required when any gate is factorized.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    layer: &LstmLayer<Var>,
    input: Var,
    prev_c: Var,
    gain: Option<Var>,
) -> Result<(Var, Var)> {
    let [gi, gf, go, gg] = &layer.gates;
    let i = gate_preactivation(tape, gi, input, gain)?;
    let i = tape.sigmoid(i);
    let f = gate_preactivation(tape, gf, input, gain)?;
    let f = tape.sigmoid(f);
    let o = gate_preactivation(tape, go, input, gain)?;
    let o = tape.sigmoid(o);
    let g = gate_preactivation(tape, gg, input, gain)?;
    let g = tape.tanh(g);

    let keep = tape.mul(f, prev_c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

/// `A · diag(F s) · B` as an explicit matrix.
pub fn factorized_matrix(a: &Tensor, b: &Tensor, f: &Tensor, s: &SceneVector) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || f.shape().len() != 2 {
        return Err(Error::Config("factor matrices must be 2-D".into()));
    }
    let rank = a.cols();
    if b.rows() != rank {
        return Err(Error::Dimension {
            what: "B rows",
            expected: rank,
            actual: b.rows(),
        });
    }
    if f.rows() != rank {
        return Err(Error::Dimension {
            what: "F rows",
            expected: rank,
            actual: f.rows(),
        });
    }
    if f.cols() != s.len() {
        return Err(Error::Dimension {
            what: "scene topics",
            expected: f.cols(),
            actual: s.len(),
        });
    }
    let gain = f.matvec(s.as_slice())?;
    let mut scaled_a = a.clone();
    for row in scaled_a.data_mut().chunks_mut(rank) {
        for (x, g) in row.iter_mut().zip(&gain) {
            *x *= g;
        }
    }
    Ok(scaled_a.matmul(b)?)
}

/// Hidden and memory states of both layers. `h2` is the exported
/// abstract-meaning state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

/// One-hidden-layer tanh network mapping `v0` to an initial state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitMlp<T> {
    pub hidden_weight: T,
    pub hidden_bias: T,
    pub out_weight: T,
    pub out_bias: T,
}

impl<T> InitMlp<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> InitMlp<U> {
        InitMlp {
            hidden_weight: f(&self.hidden_weight),
            hidden_bias: f(&self.hidden_bias),
            out_weight: f(&self.out_weight),
            out_bias: f(&self.out_bias),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.hidden_weight"), &self.hidden_weight));
        out.push((format!("{prefix}.hidden_bias"), &self.hidden_bias));
        out.push((format!("{prefix}.out_weight"), &self.out_weight));
        out.push((format!("{prefix}.out_bias"), &self.out_bias));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.hidden_weight);
        out.push(&mut self.hidden_bias);
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
    }
}

impl InitMlp<Var> {
    pub fn forward(&self, tape: &mut Tape<'_>, v0: Var) -> Result<Var> {
        let z = tape.matmul(self.hidden_weight, v0)?;
        let z = tape.add(z, self.hidden_bias)?;
        let z = tape.tanh(z);
        let y = tape.matmul(self.out_weight, z)?;
        let y = tape.add(y, self.out_bias)?;
        Ok(tape.tanh(y))
    }
}

/// Four independent initializers, for `c¹₀, h¹₀, c²₀, h²₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitMlpSet<T> {
    pub c1: InitMlp<T>,
    pub h1: InitMlp<T>,
    pub c2: InitMlp<T>,
    pub h2: InitMlp<T>,
}

impl<T> InitMlpSet<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> InitMlpSet<U> {
        InitMlpSet {
            c1: self.c1.map(f),
            h1: self.h1.map(f),
            c2: self.c2.map(f),
            h2: self.h2.map(f),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.c1.collect(&format!("{prefix}.c1"), out);
        self.h1.collect(&format!("{prefix}.h1"), out);
        self.c2.collect(&format!("{prefix}.c2"), out);
        self.h2.collect(&format!("{prefix}.h2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.c1.collect_mut(out);
        self.h1.collect_mut(out);
        self.c2.collect_mut(out);
        self.h2.collect_mut(out);
    }
}

impl InitMlpSet<Tensor> {
    pub fn random(rng: &mut impl Rng, feature_dim: usize, hidden: usize) -> Self {
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let mut one = || InitMlp {
            hidden_weight: uniform(rng, &[feature_dim, feature_dim], scale),
            hidden_bias: Tensor::zeros(&[feature_dim]),
            out_weight: uniform(rng, &[hidden, feature_dim], scale),
            out_bias: Tensor::zeros(&[hidden]),
        };
        Self {
            c1: one(),
            h1: one(),
            c2: one(),
            h2: one(),
        }
    }
}

impl InitMlpSet<Var> {
    /// `(c1, h1, c2, h2)` from the mean region feature.
    pub fn forward(&self, tape: &mut Tape<'_>, v0: Var) -> Result<[Var; 4]> {
        Ok([
            self.c1.forward(tape, v0)?,
            self.h1.forward(tape, v0)?,
            self.c2.forward(tape, v0)?,
            self.h2.forward(tape, v0)?,
        ])
    }
}

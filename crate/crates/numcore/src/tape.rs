//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to tracked values in creation
//! order. [`Tape::backward`] walks the record in exact reverse order and
//! accumulates adjoints. Parameters are bound by reference, so building a
//! tape over a large model does not copy its weights.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::tensor::{dot, log_softmax, softmax, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Clone, Copy)]
enum MatMulKind {
    MatVec,
    VecMat,
    MatMat,
    Dot,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var, MatMulKind),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy(Var, usize, Vec<f64>),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Single-owner record of tracked operations.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Adjoints {
    /// Gradient with respect to `var`; zero when `var` did not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracks a parameter without copying it.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.nodes[var.0].value.get()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Adds vector `v` (n) to every row of matrix `m` (r×n).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mt, vt) = (self.value(m), self.value(v));
        if mt.shape().len() != 2 || vt.shape() != [mt.cols()] {
            return Err(shape_err("add_row", mt, vt));
        }
        let n = mt.cols();
        let mut data = mt.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(vt.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(mt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(m, v)))
    }

    /// Matrix/vector product. Accepts (m×k)(k), (k)(k×n), (m×k)(k×n) and (k)(k).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (kind, out) = match (at.shape().len(), bt.shape().len()) {
            (2, 1) => (MatMulKind::MatVec, Tensor::vector(at.matvec(bt.data())?)),
            (1, 2) => {
                if at.len() != bt.rows() {
                    return Err(shape_err("matmul", at, bt));
                }
                let n = bt.cols();
                let mut out = vec![0.0; n];
                for (p, &x) in at.data().iter().enumerate() {
                    for (o, &w) in out.iter_mut().zip(bt.row(p)) {
                        *o += x * w;
                    }
                }
                (MatMulKind::VecMat, Tensor::vector(out))
            }
            (2, 2) => (MatMulKind::MatMat, at.matmul(bt)?),
            (1, 1) => {
                if at.len() != bt.len() {
                    return Err(shape_err("matmul", at, bt));
                }
                (MatMulKind::Dot, Tensor::scalar(dot(at.data(), bt.data())))
            }
            _ => return Err(shape_err("matmul", at, bt)),
        };
        Ok(self.push(out, Op::MatMul(a, b, kind)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Concatenates 1-D values.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(NumError::Shape {
                    op: "concat",
                    left: vec![1],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Contiguous slice `[start, start + len)` of a 1-D value.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 || len == 0 || start + len > t.len() {
            return Err(NumError::Index {
                index: start + len,
                len: t.len(),
            });
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(a, start)))
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || index >= t.rows() {
            return Err(NumError::Index {
                index,
                len: t.shape().first().copied().unwrap_or(0),
            });
        }
        let out = Tensor::vector(t.row(index).to_vec());
        Ok(self.push(out, Op::Row(a, index)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::vector(softmax(t.data())?);
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::vector(log_softmax(t.data())?);
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Fused `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if target >= t.len() {
            return Err(NumError::Index {
                index: target,
                len: t.len(),
            });
        }
        let logp = log_softmax(t.data())?;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let out = Tensor::scalar(-logp[target]);
        Ok(self.push(out, Op::CrossEntropy(logits, target, probs)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.item().is_finite() {
            return Err(NumError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Adjoints {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.get().shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, elementwise(g, bv, |x, y| x * y));
                accumulate(grads, *b, elementwise(g, av, |x, y| x * y));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::AddRow(m, v) => {
                let n = g.cols();
                let mut col = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (c, x) in col.iter_mut().zip(row) {
                        *c += x;
                    }
                }
                accumulate(grads, *m, g.clone());
                accumulate(grads, *v, Tensor::vector(col));
            }
            Op::MatMul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = matmul_backward(*kind, av, bv, g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, elementwise(g, out, |gy, y| gy * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, elementwise(g, out, |gy, y| gy * (1.0 - y * y)));
            }
            Op::Exp(a) => accumulate(grads, *a, elementwise(g, out, |gy, y| gy * y)),
            Op::Log(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, elementwise(g, x, |gy, x| gy / x));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = g.data()[offset..offset + n].to_vec();
                    accumulate(grads, p, Tensor::vector(piece));
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let mut full = Tensor::zeros(self.value(*a).shape());
                full.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, full);
            }
            Op::Row(a, r) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                let c = src.cols();
                full.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                accumulate(grads, *a, full);
            }
            Op::Softmax(a) => {
                let inner = dot(g.data(), out.data());
                accumulate(grads, *a, elementwise(g, out, |gy, y| y * (gy - inner)));
            }
            Op::LogSoftmax(a) => {
                let total = g.sum();
                accumulate(grads, *a, elementwise(g, out, |gy, y| gy - y.exp() * total));
            }
            Op::CrossEntropy(a, target, probs) => {
                let scale = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                d[*target] -= scale;
                accumulate(grads, *a, Tensor::vector(d));
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_with(b, "backward", f)
        .expect("forward pass already checked shapes")
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn matmul_backward(kind: MatMulKind, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    match kind {
        MatMulKind::MatVec => {
            // y = A x
            let (m, k) = (a.rows(), a.cols());
            let mut ga = vec![0.0; m * k];
            let mut gx = vec![0.0; k];
            for i in 0..m {
                let gi = g.data()[i];
                let arow = a.row(i);
                for j in 0..k {
                    ga[i * k + j] = gi * b.data()[j];
                    gx[j] += arow[j] * gi;
                }
            }
            (
                Tensor::matrix(m, k, ga).expect("shape"),
                Tensor::vector(gx),
            )
        }
        MatMulKind::VecMat => {
            // y = x A
            let (k, n) = (b.rows(), b.cols());
            let mut gx = vec![0.0; k];
            let mut gb = vec![0.0; k * n];
            for p in 0..k {
                let xp = a.data()[p];
                let brow = b.row(p);
                gx[p] = dot(brow, g.data());
                for j in 0..n {
                    gb[p * n + j] = xp * g.data()[j];
                }
            }
            (
                Tensor::vector(gx),
                Tensor::matrix(k, n, gb).expect("shape"),
            )
        }
        MatMulKind::MatMat => {
            let ga = g.matmul(&b.transpose()).expect("shape");
            let gb = a.transpose().matmul(g).expect("shape");
            (ga, gb)
        }
        MatMulKind::Dot => {
            let s = g.item();
            (b.scale(s), a.scale(s))
        }
    }
}

/// Gradients of a scalar `loss` with respect to named parameters.
///
/// Parameters that did not contribute to the loss receive zero tensors.
pub fn gradients(
    tape: &Tape<'_>,
    loss: Var,
    params: &[(String, Var)],
) -> Result<BTreeMap<String, Tensor>> {
    let mut adj = tape.backward(loss)?;
    Ok(params
        .iter()
        .map(|(name, var)| (name.clone(), adj.take(*var)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.mul(xv, xv).unwrap();
        let grads = gradients(&tape, y, &[("x".into(), xv)]).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let x = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let s = tape.sigmoid(xv);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap().get(xv);
        assert!(g.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn untouched_parameter_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let unused = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let uv = tape.param(&unused);
        let loss = tape.sum(xv);
        let grads = gradients(&tape, loss, &[("x".into(), xv), ("u".into(), uv)]).unwrap();
        assert_eq!(grads["u"], Tensor::zeros(&[2, 2]));
        assert_eq!(grads["x"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        assert!(matches!(
            tape.backward(xv),
            Err(NumError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn non_finite_loss_rejected() {
        let x = Tensor::scalar(0.0);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let l = tape.log(xv);
        assert_eq!(tape.backward(l).err(), Some(NumError::NonFinite("loss")));
    }

    #[test]
    fn cross_entropy_matches_log_softmax_pick() {
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let ce = tape.cross_entropy(xv, 2).unwrap();
        let ls = tape.log_softmax(xv).unwrap();
        assert_eq!(-tape.value(ls).data()[2], tape.value(ce).item());
    }
}

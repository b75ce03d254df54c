//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products. Operations check
//! shapes up front and refuse to record non-finite values.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::resloss::softmax;
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    /// `(n x m) + (m)`, broadcast over rows.
    AddBias(usize, usize),
    Tanh(usize),
    Add(usize, usize),
    Scale(usize, S),
    /// `sum_j weights[j] * inputs[j]`.
    Mix { inputs: Vec<usize>, weights: usize },
    /// `softmax((logits + noise) / tau)`; the noise only enters the value.
    GumbelSoftmax { logits: usize, tau: S },
    /// Mean squared error against a constant target.
    Mse { pred: usize, target: Tensor<S> },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when `var` does not influence the output.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize> {
        ensure!(
            var.tape == self.id && var.index < self.nodes.len(),
            State,
            "variable was not recorded on this tape"
        );
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        ensure!(
            value.is_finite(),
            Numeric,
            "non-finite value produced by {}",
            op_name(&op)
        );
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[self.index(var).expect("variable from this tape")].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(value, Op::MatMul(ia, ib))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.index(x)?, self.index(bias)?);
        let xv = &self.nodes[ix].value;
        let bv = &self.nodes[ib].value;
        ensure!(
            xv.shape().len() == 2 && bv.len() == xv.cols(),
            Dimension,
            "bias of {:?} for input {:?}",
            bv.shape(),
            xv.shape()
        );
        let c = xv.cols();
        let mut value = xv.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + bv.data()[i % c];
        }
        self.push(value, Op::AddBias(ix, ib))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.map(S::tanh);
        self.push(value, Op::Tanh(ix))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        ensure!(
            av.shape() == bv.shape(),
            Dimension,
            "add of {:?} and {:?}",
            av.shape(),
            bv.shape()
        );
        let mut value = av.clone();
        value.add_assign(bv);
        self.push(value, Op::Add(ia, ib))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.map(|v| v * factor);
        self.push(value, Op::Scale(ix, factor))
    }

    /// Sum of scalars or equally shaped tensors.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        ensure!(!terms.is_empty(), Dimension, "sum of nothing");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Convex-style combination `sum_j weights[j] * inputs[j]`.
    pub fn mix(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        ensure!(!inputs.is_empty(), Dimension, "mix of nothing");
        let iw = self.index(weights)?;
        let w = self.nodes[iw].value.data().to_vec();
        ensure!(
            w.len() == inputs.len(),
            Dimension,
            "{} weights for {} inputs",
            w.len(),
            inputs.len()
        );
        let idx = inputs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let shape = self.nodes[idx[0]].value.shape().to_vec();
        let mut value = Tensor::zeros(shape.clone());
        for (&i, &wj) in idx.iter().zip(&w) {
            let x = &self.nodes[i].value;
            ensure!(x.shape() == shape.as_slice(), Dimension, "mixed inputs differ in shape");
            for (o, &v) in value.data_mut().iter_mut().zip(x.data()) {
                *o = *o + wj * v;
            }
        }
        self.push(
            value,
            Op::Mix {
                inputs: idx,
                weights: iw,
            },
        )
    }

    /// Relaxed one-hot row from logits and fixed Gumbel noise.
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &[S], tau: S) -> Result<Var> {
        ensure!(tau > S::zero(), Domain, "temperature must be positive, got {tau}");
        let il = self.index(logits)?;
        let lv = self.nodes[il].value.data();
        ensure!(lv.len() == noise.len(), Dimension, "{} logits, {} noise", lv.len(), noise.len());
        let scaled: Vec<S> = lv.iter().zip(noise).map(|(&a, &g)| (a + g) / tau).collect();
        self.push(Tensor::vector(softmax(&scaled)), Op::GumbelSoftmax { logits: il, tau })
    }

    /// Mean squared error of `pred` against `target`.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        let ip = self.index(pred)?;
        let pv = &self.nodes[ip].value;
        ensure!(
            pv.shape() == target.shape(),
            Dimension,
            "prediction {:?} vs target {:?}",
            pv.shape(),
            target.shape()
        );
        let loss = mse_value(pv, target);
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: ip,
                target: target.clone(),
            },
        )
    }

    /// Gradients of a scalar output with respect to every recorded value.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        ensure!(!self.nodes.is_empty(), State, "backward called before any forward pass");
        let io = self.index(output)?;
        ensure!(
            self.nodes[io].value.len() == 1,
            Dimension,
            "backward needs a scalar output, got {:?}",
            self.nodes[io].value.shape()
        );
        self.backward_with_seed(output, Tensor::scalar(S::one()))
    }

    pub fn backward_with_seed(&self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        ensure!(!self.nodes.is_empty(), State, "backward called before any forward pass");
        let io = self.index(output)?;
        ensure!(
            seed.len() == self.nodes[io].value.len(),
            Dimension,
            "seed of {:?} for output {:?}",
            seed.shape(),
            self.nodes[io].value.shape()
        );
        let seed = Tensor::new(self.nodes[io].value.shape().to_vec(), seed.into_data())?;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; io + 1];
        grads[io] = Some(seed);
        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let mut gb = vec![S::zero(); c];
                    for (k, &v) in g.data().iter().enumerate() {
                        gb[k % c] = gb[k % c] + v;
                    }
                    let bshape = self.nodes[*b].value.shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::new(bshape, gb)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d = *d * (S::one() - y * y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Mix { inputs, weights } => {
                    let w = self.nodes[*weights].value.data();
                    let mut gw = Vec::with_capacity(inputs.len());
                    for (&inp, &wj) in inputs.iter().zip(w) {
                        let x = &self.nodes[inp].value;
                        gw.push(x.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum());
                        accumulate(&mut grads, inp, g.map(|v| v * wj));
                    }
                    accumulate(&mut grads, *weights, Tensor::vector(gw));
                }
                Op::GumbelSoftmax { logits, tau } => {
                    let z = node.value.data();
                    let dot: S = z.iter().zip(g.data()).map(|(&p, &d)| p * d).sum();
                    let gl: Vec<S> = z
                        .iter()
                        .zip(g.data())
                        .map(|(&p, &d)| p * (d - dot) / *tau)
                        .collect();
                    let lshape = self.nodes[*logits].value.shape().to_vec();
                    accumulate(&mut grads, *logits, Tensor::new(lshape, gl)?);
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let n = S::of(pv.len() as f64);
                    let scale = g.item() * S::of(2.0) / n;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), data)?);
                }
            }
        }
        // interior slots were consumed above; only leaves keep gradients
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], index: usize, g: Tensor<S>) {
    match &mut grads[index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Tanh(_) => "tanh",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Mix { .. } => "mix",
        Op::GumbelSoftmax { .. } => "gumbel_softmax",
        Op::Mse { .. } => "mse",
    }
}

pub(crate) fn mse_value<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> S {
    let n = S::of(pred.len() as f64);
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<S>()
        / n
}

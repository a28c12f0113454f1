//! Reverse-mode differentiation over a fixed op vocabulary.
//!
//! Every forward op appends a node holding its value; `backward` walks the
//! nodes in reverse and accumulates parameter gradients into a
//! [`ParamStore`]. Values are checked for NaN/Inf after every op.

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Storage precision of forward values. `F32` rounds every op result to
/// single precision; gradients are always accumulated in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    /// Scalar with precomputed local gradients for each input.
    Custom(Vec<(Var, Tensor2)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, name: &str, mut value: Tensor2, op: Op) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in &mut value.data {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor2) -> Result<Var> {
        self.push("constant", t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let name = store.name(id).to_string();
        self.push(&name, store.value(id).clone(), Op::Param(id))
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_bias(self.value(bias))?;
        self.push("add_bias", v, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push("scale", v, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).leaky_relu(slope);
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(a).softmax_rows(mask)?;
        self.push("softmax_rows", v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor2::concat_cols(&refs)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(idx)?;
        self.push("gather_rows", v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor2::row_vector(vec![self.value(a).sum()]);
        self.push("sum_all", v, Op::SumAll(a))
    }

    /// Scalar node whose gradient w.r.t. each input is supplied by the caller.
    pub fn custom_scalar(&mut self, name: &str, value: f64, inputs: Vec<(Var, Tensor2)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Dimension {
                    op: "custom_scalar",
                    left: self.value(*v).shape(),
                    right: g.shape(),
                });
            }
        }
        self.push(name, Tensor2::row_vector(vec![value]), Op::Custom(inputs))
    }

    /// Gradients of the scalar `output` w.r.t. every node, indexed by node.
    pub fn gradients(&self, output: Var) -> Result<Vec<Option<Tensor2>>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State("backward called on a variable not recorded on this tape".into()));
        }
        if self.value(output).shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor2::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = dout.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&dout)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, dout.transpose()),
                Op::AddBias(a, b) => {
                    let mut db = Tensor2::zeros(1, dout.cols);
                    for r in 0..dout.rows {
                        for (s, x) in db.data.iter_mut().zip(dout.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, dout.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dout.clone());
                    acc(&mut grads, *b, dout.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, dout.scale(*c)),
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut d = dout.clone();
                    for (g, &xv) in d.data.iter_mut().zip(&x.data) {
                        if xv <= 0.0 {
                            *g *= slope;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Tensor2::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = dout.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut d = Tensor2::zeros(dout.rows, w);
                        for r in 0..dout.rows {
                            d.row_mut(r).copy_from_slice(&dout.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, *p, d);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut d = Tensor2::zeros(src.rows, src.cols);
                    for (o, &ix) in idx.iter().enumerate() {
                        for (x, g) in d.row_mut(ix).iter_mut().zip(dout.row(o)) {
                            *x += g;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let src = self.value(*a);
                    acc(&mut grads, *a, Tensor2::filled(src.rows, src.cols, dout.data[0]));
                }
                Op::Custom(inputs) => {
                    for (v, g) in inputs {
                        acc(&mut grads, *v, g.scale(dout.data[0]));
                    }
                }
            }
            grads[i] = Some(dout);
        }
        Ok(grads)
    }

    /// Accumulates d(output)/d(param) into the store's gradient buffers.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(output)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
                }
                store.grad_mut(*id).add_assign(&g);
            }
        }
        Ok(())
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] that has a differentiable input records its
//! inputs and enough context to run the vector-Jacobian product later. The
//! recorded graph is owned by the `Var` handles themselves, so it is freed as
//! soon as the last handle to the loss is dropped. Operations whose inputs are
//! all constants record nothing, which is how inference avoids retaining
//! intermediate activations.
//!
//! Node ids come from a global counter, so sorting reachable nodes by
//! descending id yields a valid reverse topological order.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, shape_err, NnError, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::ParamId;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Abs,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Narrow { axis: usize, start: usize },
    AddChannelBias,
    ScaleBatch(Vec<f64>),
    Conv1d { geom: ConvGeom, bias: bool },
    ConvTranspose1d { geom: ConvGeom, bias: bool },
    Linear { bias: bool },
}

#[derive(Debug)]
enum Kind {
    Constant,
    Leaf,
    Param(ParamId),
    Op { op: Op, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    id: u64,
    value: Tensor,
    kind: Kind,
}

/// Handle to a value in the computation graph.
#[derive(Debug, Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn make(value: Tensor, kind: Kind) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            kind,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::make(value, Kind::Constant)
    }

    /// A non-parameter input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(value: Tensor) -> Self {
        Self::make(value, Kind::Leaf)
    }

    pub(crate) fn param(value: Tensor, id: ParamId) -> Self {
        Self::make(value, Kind::Param(id))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.0.kind, Kind::Constant)
    }

    fn record(value: Tensor, op: Op, inputs: &[&Var]) -> Var {
        if inputs.iter().any(|v| v.requires_grad()) {
            Self::make(
                value,
                Kind::Op {
                    op,
                    inputs: inputs.iter().map(|&v| v.clone()).collect(),
                },
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "add", |a, b| a + b)?;
        Ok(Self::record(v, Op::Add, &[self, other]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "sub", |a, b| a - b)?;
        Ok(Self::record(v, Op::Sub, &[self, other]))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "mul", |a, b| a * b)?;
        Ok(Self::record(v, Op::Mul, &[self, other]))
    }

    pub fn scale(&self, c: f64) -> Var {
        Self::record(self.value().map(|a| a * c), Op::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Self::record(self.value().map(|a| a + c), Op::AddScalar, &[self])
    }

    pub fn tanh(&self) -> Var {
        Self::record(self.value().map(tanh), Op::Tanh, &[self])
    }

    pub fn sigmoid(&self) -> Var {
        Self::record(self.value().map(sigmoid), Op::Sigmoid, &[self])
    }

    pub fn relu(&self) -> Var {
        Self::record(self.value().map(|a| a.max(0.0)), Op::Relu, &[self])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().map(|a| if a > 0.0 { a } else { slope * a });
        Self::record(v, Op::LeakyRelu(slope), &[self])
    }

    pub fn abs(&self) -> Var {
        Self::record(self.value().map(f64::abs), Op::Abs, &[self])
    }

    pub fn sum(&self) -> Var {
        Self::record(Tensor::scalar(self.value().sum()), Op::Sum, &[self])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        Self::record(Tensor::scalar(self.value().sum() / n), Op::Mean, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().clone().reshape(shape)?;
        Ok(Self::record(v, Op::Reshape, &[self]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        Ok(Self::record(transpose2(self.value()), Op::Transpose, &[self]))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("narrow", format!("axis {axis} range {start}+{len} of {s:?}")));
        }
        let (outer, inner) = split_axis(s, axis);
        let mut shape = s.to_vec();
        shape[axis] = len;
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let v = Tensor::new(shape, out)?;
        Ok(Self::record(v, Op::Narrow { axis, start }, &[self]))
    }

    /// `x[b, c, l] + bias[b, c]`, broadcasting the bias over the last axis.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[0], s[1]] {
            return Err(shape_err("add_channel_bias", s, bias.shape()));
        }
        let l = s[2];
        let mut v = self.value().clone();
        for (row, &b) in v.data_mut().chunks_mut(l).zip(bias.value().data()) {
            row.iter_mut().for_each(|a| *a += b);
        }
        Ok(Self::record(v, Op::AddChannelBias, &[self, bias]))
    }

    /// Multiplies every entry of batch item `b` by the constant `factors[b]`.
    pub fn scale_batch(&self, factors: &[f64]) -> Result<Var> {
        let s = self.shape();
        if s.is_empty() || s[0] != factors.len() {
            return Err(shape_err("scale_batch", s, &[factors.len()]));
        }
        let per = self.value().len() / s[0];
        let mut v = self.value().clone();
        for (chunk, &f) in v.data_mut().chunks_mut(per).zip(factors) {
            chunk.iter_mut().for_each(|a| *a *= f);
        }
        Ok(Self::record(v, Op::ScaleBatch(factors.to_vec()), &[self]))
    }

    /// 1-D convolution; weight `[c_out, c_in, kernel]`, optional bias `[c_out]`.
    pub fn conv1d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::conv1d(self.shape(), weight.shape(), stride, dilation, padding)?;
        check_bias("conv1d", bias, geom.c_out)?;
        let v = kernels::conv1d_forward(&geom, self.value(), weight.value(), bias.map(|b| b.value()));
        let op = Op::Conv1d {
            geom,
            bias: bias.is_some(),
        };
        Ok(Self::record(v, op, &with_bias(self, weight, bias)))
    }

    /// Transposed 1-D convolution; weight `[c_in, c_out, kernel]`.
    pub fn conv_transpose1d(&self, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::conv_transpose1d(self.shape(), weight.shape(), stride, padding)?;
        check_bias("conv_transpose1d", bias, geom.c_out)?;
        let v = kernels::conv_transpose1d_forward(&geom, self.value(), weight.value(), bias.map(|b| b.value()));
        let op = Op::ConvTranspose1d {
            geom,
            bias: bias.is_some(),
        };
        Ok(Self::record(v, op, &with_bias(self, weight, bias)))
    }

    /// Dense layer on `[n, in]` with weight `[out, in]`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (s, w) = (self.shape(), weight.shape());
        if s.len() != 2 || w.len() != 2 || s[1] != w[1] {
            return Err(shape_err("linear", s, w));
        }
        check_bias("linear", bias, w[0])?;
        let v = kernels::linear_forward(self.value(), weight.value(), bias.map(|b| b.value()));
        Ok(Self::record(
            v,
            Op::Linear { bias: bias.is_some() },
            &with_bias(self, weight, bias),
        ))
    }
}

// libm tanh and expm1 are several times slower than exp
fn tanh(a: f64) -> f64 {
    let x = a.abs();
    let r = if x < 0.02 {
        let x2 = x * x;
        x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * 62.0 / 2835.0))))
    } else {
        let e = (-2.0 * x).exp();
        (1.0 - e) / (1.0 + e)
    };
    r.copysign(a)
}

fn sigmoid(a: f64) -> f64 {
    let e = (-a.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if a >= 0.0 {
        r
    } else {
        e * r
    }
}

fn with_bias<'a>(x: &'a Var, w: &'a Var, b: Option<&'a Var>) -> Vec<&'a Var> {
    let mut v = vec![x, w];
    v.extend(b);
    v
}

fn check_bias(op: &'static str, bias: Option<&Var>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c_out] => Err(shape_err(op, b.shape(), &[c_out])),
        _ => Ok(()),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// Gradients produced by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<u64, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter handle, if it was reached.
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        match var.0.kind {
            Kind::Param(id) => self.params.get(&id),
            _ => self.leaves.get(&var.0.id),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }
}

/// Runs the reverse pass from a scalar loss.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if loss.value().len() != 1 {
        return Err(NnError::Usage(format!(
            "backward needs a one-element loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(NnError::Usage(
            "backward called on a value with no recorded forward pass".into(),
        ));
    }
    if !loss.value().all_finite() {
        return Err(NnError::NonFinite("loss".into()));
    }

    let mut nodes: HashMap<u64, Var> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if nodes.contains_key(&v.0.id) {
            continue;
        }
        if let Kind::Op { inputs, .. } = &v.0.kind {
            stack.extend(inputs.iter().filter(|i| i.requires_grad()).cloned());
        }
        nodes.insert(v.0.id, v);
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    pending.insert(loss.0.id, Tensor::full(loss.shape(), 1.0));
    let mut out = Gradients::default();

    for id in order {
        let Some(grad) = pending.remove(&id) else { continue };
        let node = &nodes[&id];
        match &node.0.kind {
            Kind::Constant => {}
            Kind::Leaf => {
                out.leaves.insert(id, grad);
            }
            Kind::Param(pid) => match out.params.get_mut(pid) {
                Some(acc) => acc.axpy(1.0, &grad)?,
                None => {
                    out.params.insert(*pid, grad);
                }
            },
            Kind::Op { op, inputs } => {
                let grads = vjp(op, inputs, &node.0.value, &grad)?;
                for (input, g) in inputs.iter().zip(grads) {
                    let Some(g) = g else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    if !g.all_finite() {
                        return Err(NnError::NonFinite(format!("gradient of {op:?} input")));
                    }
                    match pending.get_mut(&input.0.id) {
                        Some(acc) => acc.axpy(1.0, &g)?,
                        None => {
                            pending.insert(input.0.id, g);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of one op; one entry per input.
fn vjp(op: &Op, inputs: &[Var], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let x = |i: usize| inputs[i].value();
    let r = match op {
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|a| -a))],
        Op::Mul => vec![
            Some(g.zip_map(x(1), "mul", |a, b| a * b)?),
            Some(g.zip_map(x(0), "mul", |a, b| a * b)?),
        ],
        Op::Scale(c) => vec![Some(g.map(|a| a * c))],
        Op::AddScalar | Op::Reshape => {
            let gi = g.clone().reshape(x(0).shape())?;
            vec![Some(gi)]
        }
        Op::Tanh => vec![Some(g.zip_map(out, "tanh", |a, y| a * (1.0 - y * y))?)],
        Op::Sigmoid => vec![Some(g.zip_map(out, "sigmoid", |a, y| a * y * (1.0 - y))?)],
        Op::Relu => vec![Some(g.zip_map(x(0), "relu", |a, v| if v > 0.0 { a } else { 0.0 })?)],
        Op::LeakyRelu(s) => vec![Some(g.zip_map(
            x(0),
            "leaky_relu",
            |a, v| if v > 0.0 { a } else { a * s },
        )?)],
        Op::Abs => vec![Some(g.zip_map(x(0), "abs", |a, v| {
            if v > 0.0 {
                a
            } else if v < 0.0 {
                -a
            } else {
                0.0
            }
        })?)],
        Op::Sum => vec![Some(Tensor::full(x(0).shape(), g.data()[0]))],
        Op::Mean => {
            let n = x(0).len() as f64;
            vec![Some(Tensor::full(x(0).shape(), g.data()[0] / n))]
        }
        Op::Transpose => vec![Some(transpose2(g))],
        Op::Narrow { axis, start } => {
            let s = x(0).shape();
            let (outer, inner) = split_axis(s, *axis);
            let len = g.shape()[*axis];
            let mut gi = Tensor::zeros(s);
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                let src = o * len * inner;
                gi.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(gi)]
        }
        Op::AddChannelBias => {
            let l = g.shape()[2];
            let gb: Vec<f64> = g.data().chunks(l).map(|r| r.iter().sum()).collect();
            vec![Some(g.clone()), Some(Tensor::new(inputs[1].shape().to_vec(), gb)?)]
        }
        Op::ScaleBatch(f) => {
            let per = g.len() / f.len();
            let mut gi = g.clone();
            for (chunk, &c) in gi.data_mut().chunks_mut(per).zip(f) {
                chunk.iter_mut().for_each(|a| *a *= c);
            }
            vec![Some(gi)]
        }
        Op::Conv1d { geom, bias } => {
            let (gx, gw, gb) = kernels::conv1d_backward(geom, x(0), x(1), g);
            let mut v = vec![Some(gx), Some(gw)];
            if *bias {
                v.push(Some(gb));
            }
            v
        }
        Op::ConvTranspose1d { geom, bias } => {
            let (gx, gw, gb) = kernels::conv_transpose1d_backward(geom, x(0), x(1), g);
            let mut v = vec![Some(gx), Some(gw)];
            if *bias {
                v.push(Some(gb));
            }
            v
        }
        Op::Linear { bias } => {
            let (gx, gw, gb) = kernels::linear_backward(x(0), x(1), g);
            let mut v = vec![Some(gx), Some(gw)];
            if *bias {
                v.push(Some(gb));
            }
            v
        }
    };
    Ok(r)
}

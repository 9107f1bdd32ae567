//! Compact reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records every operation of one forward pass; `backward` sweeps
//! it in reverse and accumulates gradients for every node, including named
//! parameters drawn from a `ParamStore`. Graphs are rebuilt from scratch on
//! every step; nothing is retained across steps.
//!
//! Non-differentiable kinks (ReLU at 0, maximum/minimum ties) use the
//! left-derivative convention, so gradient checks must stay clear of kink
//! neighbourhoods.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor of f64 values with an explicit shape (rank 1 or 2 in
/// practice; scalars are shape `[1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch { expected: shape, actual: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

/// Named parameter tensors with gradient slots and Adam moment buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Tensor>,
    moment2: BTreeMap<String, Tensor>,
    step: u64,
    #[serde(default)]
    grads_live: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            moment1: BTreeMap::new(),
            moment2: BTreeMap::new(),
            step: 0,
            grads_live: false,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::State(format!("parameter {name} already registered")));
        }
        self.grads.insert(name.to_string(), Tensor::zeros(tensor.shape.clone()));
        self.moment1.insert(name.to_string(), Tensor::zeros(tensor.shape.clone()));
        self.moment2.insert(name.to_string(), Tensor::zeros(tensor.shape.clone()));
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
        self.grads_live = false;
    }

    fn accumulate(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if slot.data.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                expected: slot.shape.clone(),
                actual: vec![grad.len()],
            });
        }
        for (s, g) in slot.data.iter_mut().zip(grad) {
            *s += g;
        }
        self.grads_live = true;
        Ok(())
    }

    /// Standard bias-corrected Adam update over every parameter; gradients
    /// are zeroed afterwards.
    pub fn adam_step(&mut self, lr: f64, betas: (f64, f64), eps: f64) -> Result<()> {
        if !self.grads_live {
            return Err(Error::State("adam_step called with no accumulated gradients".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            let m = self.moment1.get_mut(name).expect("moment1 slot");
            let v = self.moment2.get_mut(name).expect("moment2 slot");
            for i in 0..p.data.len() {
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * g.data[i];
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Plain gradient-descent step, used by the test-time adaptation loop.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !self.grads_live {
            return Err(Error::State("sgd_step called with no accumulated gradients".into()));
        }
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            for i in 0..p.data.len() {
                p.data[i] -= lr * g.data[i];
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Writes the full store (values, moments, step counter) as JSON. The
    /// float encoding is shortest-round-trip, so a save/load cycle is
    /// bit-exact.
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, self)
            .map_err(|e| Error::State(format!("checkpoint write failed: {e}")))
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        serde_json::from_reader(reader)
            .map_err(|e| Error::DataFormat(format!("checkpoint parse failed: {e}")))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    MatMul(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Sum(usize),
    Mean(usize),
    Cumsum(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Dot(usize, usize),
    ScaleByScalar(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Computation tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch { expected: sa.to_vec(), actual: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a.0, b.0)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Neg(a.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a.0, b.0)))
    }

    /// Elementwise maximum; ties route the gradient to the left operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Maximum(a.0, b.0)))
    }

    /// Elementwise minimum; ties route the gradient to the left operand.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Minimum(a.0, b.0)))
    }

    /// Matrix product: `[m, k] x [k, n] -> [m, n]`, or matrix-vector
    /// `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                let da = self.value(a).data();
                let db = self.value(b).data();
                for i in 0..m {
                    for l in 0..k {
                        let av = da[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            out[i * n + j] += av * db[l * n + j];
                        }
                    }
                }
                Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a.0, b.0)))
            }
            (&[m, k], &[k2]) if k == k2 => {
                let da = self.value(a).data();
                let db = self.value(b).data();
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += da[i * k + l] * db[l];
                    }
                    out[i] = acc;
                }
                Ok(self.push(Tensor { shape: vec![m], data: out }, Op::MatMul(a.0, b.0)))
            }
            _ => Err(Error::ShapeMismatch { expected: sa, actual: sb }),
        }
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(Error::InvalidInput("concat expects 1-d tensors".into()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let len = data.len();
        Ok(self.push(
            Tensor { shape: vec![len], data },
            Op::Concat(parts.iter().map(|v| v.0).collect()),
        ))
    }

    /// Subrange `[start, end)` of a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 1 || end > v.len() || start >= end {
            return Err(Error::InvalidInput(format!(
                "slice {start}..{end} invalid for tensor of shape {:?}",
                v.shape()
            )));
        }
        let data = v.data()[start..end].to_vec();
        let len = end - start;
        Ok(self.push(Tensor { shape: vec![len], data }, Op::Slice(a.0, start, end)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let total: f64 = v.data().iter().sum();
        let n = v.len().max(1) as f64;
        self.push(Tensor::scalar(total / n), Op::Mean(a.0))
    }

    /// Prefix sums along a 1-D tensor.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let mut acc = 0.0;
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Cumsum(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| crate::core::sigmoid(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x * x).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Square(a.0))
    }

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data = exps.iter().map(|e| e / total).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softmax(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::AddScalar(a.0))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::Dot(a.0, b.0)))
    }

    /// Elementwise product of a tensor with a scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::InvalidInput("scale_by expects a scalar second operand".into()));
        }
        let c = self.value(s).item();
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::ScaleByScalar(a.0, s.0)))
    }

    /// Reverse sweep from a scalar loss, filling gradients for every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape.clone()))
            .collect();
        self.grads[loss.0].data[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let g = self.grads[idx].clone();
            if g.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            match self.nodes[idx].op.clone() {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i];
                        self.grads[b].data[i] += g.data[i];
                    }
                }
                Op::Sub(a, b) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i];
                        self.grads[b].data[i] -= g.data[i];
                    }
                }
                Op::Neg(a) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] -= g.data[i];
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..g.data.len() {
                        let (va, vb) = (self.nodes[a].value.data[i], self.nodes[b].value.data[i]);
                        self.grads[a].data[i] += g.data[i] * vb;
                        self.grads[b].data[i] += g.data[i] * va;
                    }
                }
                Op::Maximum(a, b) => {
                    for i in 0..g.data.len() {
                        if self.nodes[a].value.data[i] >= self.nodes[b].value.data[i] {
                            self.grads[a].data[i] += g.data[i];
                        } else {
                            self.grads[b].data[i] += g.data[i];
                        }
                    }
                }
                Op::Minimum(a, b) => {
                    for i in 0..g.data.len() {
                        if self.nodes[a].value.data[i] <= self.nodes[b].value.data[i] {
                            self.grads[a].data[i] += g.data[i];
                        } else {
                            self.grads[b].data[i] += g.data[i];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let sa = self.nodes[a].value.shape.clone();
                    let sb = self.nodes[b].value.shape.clone();
                    let (m, k) = (sa[0], sa[1]);
                    if sb.len() == 2 {
                        let n = sb[1];
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g.data[i * n + j] * self.nodes[b].value.data[l * n + j];
                                }
                                self.grads[a].data[i * k + l] += acc;
                            }
                        }
                        for l in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += self.nodes[a].value.data[i * k + l] * g.data[i * n + j];
                                }
                                self.grads[b].data[l * n + j] += acc;
                            }
                        }
                    } else {
                        for i in 0..m {
                            let gi = g.data[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                self.grads[a].data[i * k + l] += gi * self.nodes[b].value.data[l];
                                self.grads[b].data[l] += gi * self.nodes[a].value.data[i * k + l];
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p].value.data.len();
                        for i in 0..len {
                            self.grads[p].data[i] += g.data[offset + i];
                        }
                        offset += len;
                    }
                }
                Op::Slice(a, start, _end) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[start + i] += g.data[i];
                    }
                }
                Op::Sum(a) => {
                    let gi = g.data[0];
                    for x in self.grads[a].data.iter_mut() {
                        *x += gi;
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.data.len().max(1) as f64;
                    let gi = g.data[0] / n;
                    for x in self.grads[a].data.iter_mut() {
                        *x += gi;
                    }
                }
                Op::Cumsum(a) => {
                    // dx_j = sum_{i >= j} g_i
                    let mut acc = 0.0;
                    for i in (0..g.data.len()).rev() {
                        acc += g.data[i];
                        self.grads[a].data[i] += acc;
                    }
                }
                Op::Relu(a) => {
                    for i in 0..g.data.len() {
                        if self.nodes[a].value.data[i] > 0.0 {
                            self.grads[a].data[i] += g.data[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for i in 0..g.data.len() {
                        let y = self.nodes[idx].value.data[i];
                        self.grads[a].data[i] += g.data[i] * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for i in 0..g.data.len() {
                        let y = self.nodes[idx].value.data[i];
                        self.grads[a].data[i] += g.data[i] * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i] * self.nodes[idx].value.data[i];
                    }
                }
                Op::Log(a) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i] / self.nodes[a].value.data[i];
                    }
                }
                Op::Square(a) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i] * 2.0 * self.nodes[a].value.data[i];
                    }
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[idx].value.data;
                    let gy: f64 = g.data.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += y[i] * (g.data[i] - gy);
                    }
                }
                Op::Scale(a, c) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i] * c;
                    }
                }
                Op::AddScalar(a) => {
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i];
                    }
                }
                Op::Dot(a, b) => {
                    let gi = g.data[0];
                    for i in 0..self.nodes[a].value.data.len() {
                        self.grads[a].data[i] += gi * self.nodes[b].value.data[i];
                        self.grads[b].data[i] += gi * self.nodes[a].value.data[i];
                    }
                }
                Op::ScaleByScalar(a, s) => {
                    let c = self.nodes[s].value.data[0];
                    let mut acc = 0.0;
                    for i in 0..g.data.len() {
                        self.grads[a].data[i] += g.data[i] * c;
                        acc += g.data[i] * self.nodes[a].value.data[i];
                    }
                    self.grads[s].data[0] += acc;
                }
            }
        }
        Ok(())
    }

    /// Routes the gradients of every `Param` node into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if self.grads.is_empty() {
            return Err(Error::State("accumulate_param_grads before backward".into()));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                store.accumulate(name, &self.grads[idx].data)?;
            }
        }
        Ok(())
    }
}

/// Compares the analytic gradient of a scalar-valued tape function against
/// central finite differences at `point`, returning the maximum relative
/// error max |analytic - fd| / max(1, |analytic|) over coordinates.
pub fn grad_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::InvalidInput("grad_check target must be scalar-valued".into()));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(x).clone();

    let mut eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone());
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_relative_eq!(tape.grad(x).item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert_relative_eq!(tape.grad(x).item(), 0.25);
    }

    #[test]
    fn forward_op_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = tape.leaf(Tensor::vector(vec![2.0, 0.5, 0.2]));
        let cs = tape.cumsum(c);
        assert_eq!(tape.value(cs).data(), &[2.0, 2.5, 2.7]);

        let logits = tape.leaf(Tensor::vector(vec![1.3, 1.3, 1.3, 1.3]));
        let sm = tape.softmax(logits);
        for &p in tape.value(sm).data() {
            assert_relative_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { expected, actual }) => {
                assert_eq!(expected, vec![2]);
                assert_eq!(actual, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let b_fixed: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let point = Tensor::matrix(3, 4, a0).unwrap();
        let b_t = Tensor::matrix(4, 2, b_fixed).unwrap();
        let err = grad_check(
            |tape, a| {
                let b = tape.leaf(b_t.clone());
                let c = tape.matmul(a, b)?;
                let sq = tape.square(c);
                Ok(tape.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul grad error {err}");
    }

    #[test]
    fn composite_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            // keep clear of the relu kink
            let x0: Vec<f64> =
                x0.into_iter().map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v }).collect();
            let point = Tensor::vector(x0);
            let err = grad_check(
                |tape, x| {
                    let s = tape.sigmoid(x);
                    let t = tape.tanh(x);
                    let m = tape.mul(s, t)?;
                    let r = tape.relu(m);
                    let c = tape.cumsum(r);
                    let e = tape.exp(x);
                    let sm = tape.softmax(e);
                    let d = tape.dot(c, sm)?;
                    let sq = tape.square(d);
                    Ok(tape.mean(sq))
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "composite grad error {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.3, -0.8, 1.7]));
            let s = tape.sigmoid(x);
            let sq = tape.square(s);
            let l = tape.sum(sq);
            tape.backward(l).unwrap();
            tape.grad(x).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let prod = tape.mul(w, zero).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store).unwrap();
        store.adam_step(1e-2, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_lr_zero_is_identity_and_needs_grads() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(5.0)).unwrap();
        assert!(store.adam_step(0.1, (0.9, 0.999), 1e-8).is_err());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.square(w);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store).unwrap();
        store.adam_step(0.0, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(store.get("w").unwrap().item(), 5.0);
    }

    #[test]
    fn adam_constant_gradient_converges_to_unit_steps() {
        // with a constant gradient the bias-corrected update tends to lr
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        let lr = 1e-2;
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let loss = tape.scale(w, 3.0); // constant gradient 3
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut store).unwrap();
            store.adam_step(lr, (0.9, 0.999), 1e-8).unwrap();
            let cur = store.get("w").unwrap().item();
            last_step = (cur - prev).abs();
            prev = cur;
        }
        assert_relative_eq!(last_step, lr, epsilon = 1e-4);
    }

    #[test]
    fn param_store_roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store
            .insert("a", Tensor::vector(vec![0.1, -3.7e-12, 1.0 / 3.0, f64::MIN_POSITIVE]))
            .unwrap();
        store.insert("b", Tensor::matrix(2, 2, vec![1.5, 2.5, -0.25, 9.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let loaded = ParamStore::load(buf.as_slice()).unwrap();
        for name in ["a", "b"] {
            let orig = store.get(name).unwrap();
            let back = loaded.get(name).unwrap();
            assert_eq!(orig.shape(), back.shape());
            for (x, y) in orig.data().iter().zip(back.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(2.0)).is_err());
    }
}

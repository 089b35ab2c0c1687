//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//!
//! The tape is append-only: forward evaluation happens at recording time and
//! the backward pass walks the tape in reverse, so topological order is free.
//! Every op checks its output for NaN/Inf and fails early instead of letting
//! bad values propagate.

use crate::tensor::{patches, patches_adjoint, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("index {index} out of bounds for vector of length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
}

/// Elementwise activation functions.
///
/// `Softplus` is the default for analysis runs: it is Lipschitz, smooth,
/// analytic and non-polynomial. `Relu` is available for practical runs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Lipschitz constant of the activation, reported as analysis metadata.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Identity | Activation::Relu | Activation::Softplus => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }

    /// Smoothness constant (Lipschitz constant of the derivative).
    pub fn smoothness(self) -> f64 {
        match self {
            Activation::Identity => 0.0,
            Activation::Relu => f64::INFINITY,
            Activation::Softplus => 0.25,
            Activation::Sigmoid => 0.1,
        }
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Patches {
        src: ValueId,
        k_c: usize,
    },
    Activate {
        src: ValueId,
        kind: Activation,
    },
    /// `mul * x + add`, elementwise with constants; only the slope matters
    /// for the backward pass.
    Affine {
        src: ValueId,
        mul: f64,
    },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// Scalar node times tensor node.
    ScalarMul {
        scalar: ValueId,
        tensor: ValueId,
    },
    /// Frobenius inner product, yields a scalar.
    Dot(ValueId, ValueId),
    Softmax(ValueId),
    Index {
        src: ValueId,
        index: usize,
    },
    /// Hard threshold to [0, 1]; gradient is exactly zero outside (0, 1).
    Clamp01(ValueId),
    AvgPool {
        src: ValueId,
        k_c: usize,
    },
    MaxPool {
        src: ValueId,
        /// Source column per output element, -1 when the zero padding won.
        argmax: Vec<isize>,
    },
    /// Keep every `stride`-th column.
    SubsampleCols {
        src: ValueId,
        stride: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Build with the op methods, then call [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<ValueId, AutodiffError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
            }
            .into());
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn needs_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<ValueId, AutodiffError> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<ValueId, AutodiffError> {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn patches(&mut self, src: ValueId, k_c: usize) -> Result<ValueId, AutodiffError> {
        let value = patches(self.value(src), k_c)?;
        let rg = self.needs_grad(src);
        self.push(value, Op::Patches { src, k_c }, rg)
    }

    pub fn activate(&mut self, src: ValueId, kind: Activation) -> Result<ValueId, AutodiffError> {
        let value = self.value(src).map(|x| kind.apply(x));
        let rg = self.needs_grad(src);
        self.push(value, Op::Activate { src, kind }, rg)
    }

    pub fn affine(&mut self, src: ValueId, mul: f64, add: f64) -> Result<ValueId, AutodiffError> {
        let value = self.value(src).map(|x| mul * x + add);
        let rg = self.needs_grad(src);
        self.push(value, Op::Affine { src, mul }, rg)
    }

    pub fn scale(&mut self, src: ValueId, c: f64) -> Result<ValueId, AutodiffError> {
        self.affine(src, c, 0.0)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scalar_mul(&mut self, scalar: ValueId, tensor: ValueId) -> Result<ValueId, AutodiffError> {
        debug_assert!(self.value(scalar).is_scalar());
        let s = self.value(scalar).scalar_value();
        let value = self.value(tensor).scale(s);
        let rg = self.needs_grad(scalar) || self.needs_grad(tensor);
        self.push(value, Op::ScalarMul { scalar, tensor }, rg)
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let value = Tensor::scalar(self.value(a).dot(self.value(b))?);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Dot(a, b), rg)
    }

    /// Max-subtracted softmax over a rank-1 tensor.
    pub fn softmax(&mut self, src: ValueId) -> Result<ValueId, AutodiffError> {
        let x = self.value(src);
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data().iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = Tensor::new(x.shape().to_vec(), exps.iter().map(|e| e / sum).collect())?;
        let rg = self.needs_grad(src);
        self.push(value, Op::Softmax(src), rg)
    }

    /// Extract one component of a rank-1 tensor as a scalar node.
    pub fn index(&mut self, src: ValueId, index: usize) -> Result<ValueId, AutodiffError> {
        let x = self.value(src);
        if index >= x.numel() {
            return Err(AutodiffError::IndexOutOfBounds {
                index,
                len: x.numel(),
            });
        }
        let value = Tensor::scalar(x.data()[index]);
        let rg = self.needs_grad(src);
        self.push(value, Op::Index { src, index }, rg)
    }

    pub fn clamp01(&mut self, src: ValueId) -> Result<ValueId, AutodiffError> {
        let value = self.value(src).map(|x| x.clamp(0.0, 1.0));
        let rg = self.needs_grad(src);
        self.push(value, Op::Clamp01(src), rg)
    }

    /// Mean over the same sliding windows as [`patches`], zero padded.
    pub fn avg_pool(&mut self, src: ValueId, k_c: usize) -> Result<ValueId, AutodiffError> {
        let x = self.value(src);
        if k_c == 0 || k_c % 2 == 0 {
            return Err(TensorError::EvenKernel(k_c).into());
        }
        let (m, p) = (x.rows(), x.cols());
        let pad = (k_c - 1) / 2;
        let mut value = Tensor::zeros(vec![m, p]);
        for i in 0..m {
            for t in 0..p {
                let mut acc = 0.0;
                for j in 0..k_c {
                    let src_col = t as isize + j as isize - pad as isize;
                    if src_col >= 0 && (src_col as usize) < p {
                        acc += x.at(i, src_col as usize);
                    }
                }
                value.set(i, t, acc / k_c as f64);
            }
        }
        let rg = self.needs_grad(src);
        self.push(value, Op::AvgPool { src, k_c }, rg)
    }

    /// Max over the same sliding windows as [`patches`], zero padded; the
    /// padding zeros participate in the max.
    pub fn max_pool(&mut self, src: ValueId, k_c: usize) -> Result<ValueId, AutodiffError> {
        let x = self.value(src);
        if k_c == 0 || k_c % 2 == 0 {
            return Err(TensorError::EvenKernel(k_c).into());
        }
        let (m, p) = (x.rows(), x.cols());
        let pad = (k_c - 1) / 2;
        let mut value = Tensor::zeros(vec![m, p]);
        let mut argmax = vec![-1isize; m * p];
        for i in 0..m {
            for t in 0..p {
                let mut best = 0.0;
                let mut best_col = -1isize;
                let mut saw_in_range = false;
                for j in 0..k_c {
                    let src_col = t as isize + j as isize - pad as isize;
                    let (v, col) = if src_col >= 0 && (src_col as usize) < p {
                        (x.at(i, src_col as usize), src_col)
                    } else {
                        (0.0, -1)
                    };
                    if !saw_in_range || v > best {
                        best = v;
                        best_col = col;
                        saw_in_range = true;
                    }
                }
                value.set(i, t, best);
                argmax[i * p + t] = best_col;
            }
        }
        let rg = self.needs_grad(src);
        self.push(value, Op::MaxPool { src, argmax }, rg)
    }

    pub fn subsample_cols(&mut self, src: ValueId, stride: usize) -> Result<ValueId, AutodiffError> {
        if stride == 0 {
            return Err(TensorError::Invalid("stride must be >= 1".into()).into());
        }
        let x = self.value(src);
        let (m, p) = (x.rows(), x.cols());
        let out_p = p.div_ceil(stride);
        let mut value = Tensor::zeros(vec![m, out_p]);
        for i in 0..m {
            for (jo, js) in (0..p).step_by(stride).enumerate() {
                value.set(i, jo, x.at(i, js));
            }
        }
        let rg = self.needs_grad(src);
        self.push(value, Op::SubsampleCols { src, stride }, rg)
    }

    /// Sum a non-empty list of same-shaped nodes.
    pub fn sum_nodes(&mut self, ids: &[ValueId]) -> Result<ValueId, AutodiffError> {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    /// Reverse-mode gradients of a scalar `root` with respect to every
    /// gradient-requiring node reachable from it.
    pub fn backward(&self, root: ValueId) -> Result<Gradients, AutodiffError> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }

        // Mark ancestors of the root so unrelated tape segments are skipped.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        reachable[root.0] = true;
        while let Some(i) = stack.pop() {
            for parent in op_parents(&self.nodes[i].op) {
                if !reachable[parent.0] {
                    reachable[parent.0] = true;
                    stack.push(parent.0);
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            self.accumulate_parents(i, &grad, &mut grads)?;
            grads[i] = Some(grad);
        }

        Ok(Gradients { grads })
    }

    fn accumulate_parents(
        &self,
        i: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    let bt = self.value(*b).transpose();
                    let da = grad.matmul(&bt)?;
                    accumulate(grads, *a, da)?;
                }
                if self.needs_grad(*b) {
                    let at = self.value(*a).transpose();
                    let db = at.matmul(grad)?;
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Patches { src, k_c } => {
                if self.needs_grad(*src) {
                    let s = self.value(*src);
                    let d = patches_adjoint(grad, s.rows(), s.cols(), *k_c);
                    accumulate(grads, *src, d)?;
                }
            }
            Op::Activate { src, kind } => {
                if self.needs_grad(*src) {
                    let x = self.value(*src);
                    let d = x.map(|v| kind.derivative(v)).mul(grad)?;
                    accumulate(grads, *src, d)?;
                }
            }
            Op::Affine { src, mul } => {
                if self.needs_grad(*src) {
                    accumulate(grads, *src, grad.scale(*mul))?;
                }
            }
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    accumulate(grads, *a, grad.clone())?;
                }
                if self.needs_grad(*b) {
                    accumulate(grads, *b, grad.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*a) {
                    accumulate(grads, *a, grad.clone())?;
                }
                if self.needs_grad(*b) {
                    accumulate(grads, *b, grad.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    accumulate(grads, *a, grad.mul(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    accumulate(grads, *b, grad.mul(self.value(*a))?)?;
                }
            }
            Op::ScalarMul { scalar, tensor } => {
                if self.needs_grad(*scalar) {
                    let d = Tensor::scalar(grad.dot(self.value(*tensor))?);
                    accumulate(grads, *scalar, d)?;
                }
                if self.needs_grad(*tensor) {
                    let s = self.value(*scalar).scalar_value();
                    accumulate(grads, *tensor, grad.scale(s))?;
                }
            }
            Op::Dot(a, b) => {
                let g = grad.scalar_value();
                if self.needs_grad(*a) {
                    accumulate(grads, *a, self.value(*b).scale(g))?;
                }
                if self.needs_grad(*b) {
                    accumulate(grads, *b, self.value(*a).scale(g))?;
                }
            }
            Op::Softmax(src) => {
                if self.needs_grad(*src) {
                    let y = &node.value;
                    let inner: f64 = grad
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * yv)
                        .sum();
                    let d = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&yv, &g)| yv * (g - inner))
                            .collect(),
                    )?;
                    accumulate(grads, *src, d)?;
                }
            }
            Op::Index { src, index } => {
                if self.needs_grad(*src) {
                    let mut d = Tensor::zeros(self.value(*src).shape().to_vec());
                    d.data_mut()[*index] = grad.scalar_value();
                    accumulate(grads, *src, d)?;
                }
            }
            Op::Clamp01(src) => {
                if self.needs_grad(*src) {
                    let x = self.value(*src);
                    let d = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&v, &g)| if v > 0.0 && v < 1.0 { g } else { 0.0 })
                            .collect(),
                    )?;
                    accumulate(grads, *src, d)?;
                }
            }
            Op::AvgPool { src, k_c } => {
                if self.needs_grad(*src) {
                    let x = self.value(*src);
                    let (m, p) = (x.rows(), x.cols());
                    let pad = (k_c - 1) / 2;
                    let mut d = Tensor::zeros(vec![m, p]);
                    let inv = 1.0 / *k_c as f64;
                    for i in 0..m {
                        for t in 0..p {
                            let g = grad.at(i, t) * inv;
                            for j in 0..*k_c {
                                let src_col = t as isize + j as isize - pad as isize;
                                if src_col >= 0 && (src_col as usize) < p {
                                    let c = src_col as usize;
                                    d.set(i, c, d.at(i, c) + g);
                                }
                            }
                        }
                    }
                    accumulate(grads, *src, d)?;
                }
            }
            Op::MaxPool { src, argmax, .. } => {
                if self.needs_grad(*src) {
                    let x = self.value(*src);
                    let (m, p) = (x.rows(), x.cols());
                    let mut d = Tensor::zeros(vec![m, p]);
                    for i in 0..m {
                        for t in 0..p {
                            let col = argmax[i * p + t];
                            if col >= 0 {
                                let c = col as usize;
                                d.set(i, c, d.at(i, c) + grad.at(i, t));
                            }
                        }
                    }
                    accumulate(grads, *src, d)?;
                }
            }
            Op::SubsampleCols { src, stride } => {
                if self.needs_grad(*src) {
                    let x = self.value(*src);
                    let (m, p) = (x.rows(), x.cols());
                    let mut d = Tensor::zeros(vec![m, p]);
                    for i in 0..m {
                        for (jo, js) in (0..p).step_by(*stride).enumerate() {
                            d.set(i, js, grad.at(i, jo));
                        }
                    }
                    accumulate(grads, *src, d)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(
    grads: &mut [Option<Tensor>],
    id: ValueId,
    contribution: Tensor,
) -> Result<(), AutodiffError> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&contribution)?;
        }
        slot @ None => *slot = Some(contribution),
    }
    Ok(())
}

fn op_parents(op: &Op) -> Vec<ValueId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => {
            vec![*a, *b]
        }
        Op::ScalarMul { scalar, tensor } => vec![*scalar, *tensor],
        Op::Patches { src, .. }
        | Op::Activate { src, .. }
        | Op::Affine { src, .. }
        | Op::Softmax(src)
        | Op::Index { src, .. }
        | Op::Clamp01(src)
        | Op::AvgPool { src, .. }
        | Op::MaxPool { src, .. }
        | Op::SubsampleCols { src, .. } => vec![*src],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Patches { .. } => "patches",
        Op::Activate { .. } => "activate",
        Op::Affine { .. } => "affine",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::ScalarMul { .. } => "scalar_mul",
        Op::Dot(..) => "dot",
        Op::Softmax(..) => "softmax",
        Op::Index { .. } => "index",
        Op::Clamp01(..) => "clamp01",
        Op::AvgPool { .. } => "avg_pool",
        Op::MaxPool { .. } => "max_pool",
        Op::SubsampleCols { .. } => "subsample_cols",
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if any flowed there.
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient as a dense tensor, zeros when nothing flowed.
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Per-sample gradient vectors over a shared tape.
///
/// `losses[i]` must be the scalar loss of sample `i`; the returned vector `i`
/// concatenates the gradients of `losses[i]` with respect to `params`, in the
/// given parameter order, with zeros for parameters the loss never touched.
pub fn per_sample_gradients(
    graph: &Graph,
    losses: &[ValueId],
    params: &[ValueId],
) -> Result<Vec<Vec<f64>>, AutodiffError> {
    let mut out = Vec::with_capacity(losses.len());
    for &loss in losses {
        let grads = graph.backward(loss)?;
        let mut flat = Vec::new();
        for &p in params {
            let shape = graph.value(p).shape().to_vec();
            flat.extend_from_slice(grads.get_or_zeros(p, &shape).data());
        }
        out.push(flat);
    }
    Ok(out)
}

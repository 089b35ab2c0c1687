//! The over-parameterized cell: a DAG whose edges carry candidate operations
//! mixed by continuous weights (softmax mode) or independent stochastic gates
//! (gate mode), plus the squared loss with per-node linear heads.

use crate::autodiff::{Activation, AutodiffError, Graph, ValueId};
use crate::gates::gate_node;
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupernetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("predictions and targets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid network config: {0}")]
    BadConfig(String),
}

/// One candidate operation on an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperationKind {
    Zero,
    Skip,
    Conv { kernel: usize },
    AvgPool { kernel: usize },
    MaxPool { kernel: usize },
}

impl OperationKind {
    pub fn is_conv(self) -> bool {
        matches!(self, OperationKind::Conv { .. })
    }

    pub fn is_skip(self) -> bool {
        matches!(self, OperationKind::Skip)
    }

    pub fn is_zero(self) -> bool {
        matches!(self, OperationKind::Zero)
    }

    pub fn label(self) -> String {
        match self {
            OperationKind::Zero => "zero".into(),
            OperationKind::Skip => "skip".into(),
            OperationKind::Conv { kernel } => format!("conv{kernel}"),
            OperationKind::AvgPool { kernel } => format!("avg_pool{kernel}"),
            OperationKind::MaxPool { kernel } => format!("max_pool{kernel}"),
        }
    }
}

/// The three-operation set used throughout the convergence analysis.
pub fn analysis_op_set() -> Vec<OperationKind> {
    vec![
        OperationKind::Zero,
        OperationKind::Skip,
        OperationKind::Conv { kernel: 3 },
    ]
}

/// The eight-operation practical search set. The separable/dilated variants
/// are modeled as independent plain convolutions of the matching kernel size,
/// each with its own weight tensor.
pub fn practical_op_set() -> Vec<OperationKind> {
    vec![
        OperationKind::Zero,
        OperationKind::Skip,
        OperationKind::Conv { kernel: 3 },
        OperationKind::Conv { kernel: 5 },
        OperationKind::Conv { kernel: 3 },
        OperationKind::Conv { kernel: 5 },
        OperationKind::AvgPool { kernel: 3 },
        OperationKind::MaxPool { kernel: 3 },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EdgeSpec {
    /// Source node index.
    pub from: usize,
    /// Destination node index, always greater than `from`.
    pub to: usize,
    pub ops: Vec<OperationKind>,
}

/// Cell topology: `h` nodes where the first `num_inputs` are stem outputs and
/// every later node connects to all earlier nodes.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CellGraph {
    pub h: usize,
    pub num_inputs: usize,
    pub edges: Vec<EdgeSpec>,
    /// `(edge index, op index)` of every Conv op, in canonical order; the
    /// position in this list is the op's weight id.
    pub conv_slots: Vec<(usize, usize)>,
}

impl CellGraph {
    /// Fully-connected cell with the same op list on every edge.
    pub fn uniform(h: usize, num_inputs: usize, ops: &[OperationKind]) -> Result<Self, SupernetError> {
        if h == 0 || num_inputs == 0 || num_inputs > h {
            return Err(SupernetError::BadConfig(format!(
                "need 1 <= num_inputs <= h, got h={h}, num_inputs={num_inputs}"
            )));
        }
        let mut edges = Vec::new();
        for to in num_inputs..h {
            for from in 0..to {
                edges.push(EdgeSpec {
                    from,
                    to,
                    ops: ops.to_vec(),
                });
            }
        }
        Ok(Self::from_edges(h, num_inputs, edges))
    }

    /// Cell from explicit per-edge op lists (edges must go low to high).
    pub fn from_edges(h: usize, num_inputs: usize, edges: Vec<EdgeSpec>) -> Self {
        let mut conv_slots = Vec::new();
        for (e, edge) in edges.iter().enumerate() {
            debug_assert!(edge.from < edge.to && edge.to < h);
            for (t, op) in edge.ops.iter().enumerate() {
                if op.is_conv() {
                    conv_slots.push((e, t));
                }
            }
        }
        Self {
            h,
            num_inputs,
            edges,
            conv_slots,
        }
    }

    pub fn analysis(h: usize) -> Result<Self, SupernetError> {
        Self::uniform(h, 1, &analysis_op_set())
    }

    pub fn practical(h: usize) -> Result<Self, SupernetError> {
        Self::uniform(h, 1, &practical_op_set())
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.from == from && e.to == to)
    }

    /// Weight id of the Conv op at `(edge, op)`, if it is one.
    pub fn conv_slot(&self, edge: usize, op: usize) -> Option<usize> {
        self.conv_slots.iter().position(|&s| s == (edge, op))
    }

    pub fn total_gates(&self) -> usize {
        self.edges.iter().map(|e| e.ops.len()).sum()
    }

    /// Flat index of op `t` on edge `e` in (edge-major, op-minor) order.
    pub fn flat_gate_index(&self, edge: usize, op: usize) -> usize {
        self.edges[..edge].iter().map(|e| e.ops.len()).sum::<usize>() + op
    }

    /// Inverse of [`Self::flat_gate_index`].
    pub fn gate_position(&self, flat: usize) -> (usize, usize) {
        let mut rest = flat;
        for (e, edge) in self.edges.iter().enumerate() {
            if rest < edge.ops.len() {
                return (e, rest);
            }
            rest -= edge.ops.len();
        }
        panic!("flat gate index {flat} out of range");
    }

    /// Consecutive-node edges forming the depth-`h` path, starting at the
    /// input node that carries the previous cell's output.
    pub fn spine_edges(&self) -> Vec<usize> {
        let start = self.num_inputs - 1;
        (start..self.h - 1)
            .filter_map(|l| self.edge_index(l, l + 1))
            .collect()
    }

    /// Intermediate (non-stem) node indices.
    pub fn intermediate_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.num_inputs..self.h
    }
}

/// Static sizes of one cell's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetDims {
    /// Input channel count fed to the stem.
    pub in_channels: usize,
    /// Node channel count.
    pub m: usize,
    /// Spatial width.
    pub p: usize,
    /// Stem kernel size.
    pub stem_kernel: usize,
}

/// Weights of one cell: stem, per-conv-slot kernels and per-node heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetParams {
    pub stem: Tensor,
    pub convs: Vec<Tensor>,
    pub heads: Vec<Tensor>,
}

impl SuperNetParams {
    /// Unit-Gaussian initialization of every entry.
    pub fn init_gaussian(
        cell: &CellGraph,
        dims: &NetDims,
        rng: &mut impl Rng,
    ) -> Result<Self, SupernetError> {
        let mut draw = |shape: Vec<usize>| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(shape, data).expect("shape/data agree")
        };
        let stem = draw(vec![dims.m, dims.stem_kernel * dims.in_channels]);
        let mut convs = Vec::new();
        for &(e, t) in &cell.conv_slots {
            let OperationKind::Conv { kernel } = cell.edges[e].ops[t] else {
                unreachable!()
            };
            convs.push(draw(vec![dims.m, kernel * dims.m]));
        }
        let heads = (0..cell.h).map(|_| draw(vec![dims.m, dims.p])).collect();
        Ok(Self { stem, convs, heads })
    }

    /// Plain gradient descent: `theta <- theta - eta * grad` on every tensor
    /// present in `grads` (missing entries are untouched).
    pub fn gd_step(&mut self, grads: &ParamGrads, eta: f64) {
        apply_gd(&mut self.stem, grads.stem.as_ref(), eta);
        for (w, g) in self.convs.iter_mut().zip(&grads.convs) {
            apply_gd(w, g.as_ref(), eta);
        }
        for (u, g) in self.heads.iter_mut().zip(&grads.heads) {
            apply_gd(u, g.as_ref(), eta);
        }
    }
}

fn apply_gd(param: &mut Tensor, grad: Option<&Tensor>, eta: f64) {
    if let Some(g) = grad {
        for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
            *p -= eta * gv;
        }
    }
}

/// Gradients for one cell's parameters, `None` where nothing flowed.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub stem: Option<Tensor>,
    pub convs: Vec<Option<Tensor>>,
    pub heads: Vec<Option<Tensor>>,
}

/// Tape ids of one cell's registered parameters.
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub stem: ValueId,
    pub convs: Vec<ValueId>,
    pub heads: Vec<ValueId>,
}

impl SuperNetParams {
    /// Register every tensor on the tape, trainable or frozen.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<ParamIds, SupernetError> {
        let mut put = |t: &Tensor| -> Result<ValueId, AutodiffError> {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let stem = put(&self.stem)?;
        let convs = self.convs.iter().map(&mut put).collect::<Result<_, _>>()?;
        let heads = self.heads.iter().map(&mut put).collect::<Result<_, _>>()?;
        Ok(ParamIds { stem, convs, heads })
    }

    /// Collect gradients for every parameter after a backward pass.
    pub fn collect_grads(
        &self,
        grads: &crate::autodiff::Gradients,
        ids: &ParamIds,
    ) -> ParamGrads {
        ParamGrads {
            stem: grads.get(ids.stem).cloned(),
            convs: ids.convs.iter().map(|&id| grads.get(id).cloned()).collect(),
            heads: ids.heads.iter().map(|&id| grads.get(id).cloned()).collect(),
        }
    }

    /// Parameter tensors in the documented flattening order: stem first, then
    /// conv weights sorted by (destination, source, op slot), heads last.
    pub fn ordered_ids(&self, ids: &ParamIds) -> Vec<ValueId> {
        let mut out = vec![ids.stem];
        out.extend(&ids.convs);
        out.extend(&ids.heads);
        out
    }
}

/// Convolution op: `tau_scale * sigma(W * patches(X))`.
///
/// `tau_scale` defaults to `1/sqrt(input channels)` when `None`.
pub fn conv_op(
    g: &mut Graph,
    w: ValueId,
    x: ValueId,
    activation: Activation,
    tau_scale: Option<f64>,
) -> Result<ValueId, SupernetError> {
    let in_rows = g.value(x).rows();
    let w_cols = g.value(w).cols();
    if w_cols % in_rows != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_op",
            expected: g.value(w).shape().to_vec(),
            got: g.value(x).shape().to_vec(),
        }
        .into());
    }
    let k_c = w_cols / in_rows;
    let tau = tau_scale.unwrap_or(1.0 / (in_rows as f64).sqrt());
    let ph = g.patches(x, k_c)?;
    let z = g.matmul(w, ph)?;
    let a = g.activate(z, activation)?;
    Ok(g.scale(a, tau)?)
}

/// Per-edge, per-op mixing weight nodes; `None` marks an op excluded from
/// this forward pass (edge-op subsampling).
pub type EdgeWeights = Vec<Vec<Option<ValueId>>>;

/// Constant or trainable mixing weights from plain values.
pub fn fixed_weight_nodes(
    g: &mut Graph,
    values: &[Vec<f64>],
    trainable: bool,
) -> Result<EdgeWeights, SupernetError> {
    let mut out = Vec::with_capacity(values.len());
    for edge in values {
        let mut per_op = Vec::with_capacity(edge.len());
        for &v in edge {
            let id = if trainable {
                g.param(Tensor::scalar(v))?
            } else {
                g.constant(Tensor::scalar(v))?
            };
            per_op.push(Some(id));
        }
        out.push(per_op);
    }
    Ok(out)
}

/// Handle for one edge's softmax weighting: the registered logit leaf and
/// which op indices it covers (softmax renormalizes over that subset).
pub struct SoftmaxEdgeHandle {
    pub leaf: ValueId,
    pub selected: Vec<usize>,
}

/// Softmax mixing weights, optionally restricted to an active subset per edge.
pub fn softmax_weight_nodes(
    g: &mut Graph,
    betas: &[Vec<f64>],
    active: Option<&[Vec<usize>]>,
    trainable: bool,
) -> Result<(EdgeWeights, Vec<SoftmaxEdgeHandle>), SupernetError> {
    let mut weights = Vec::with_capacity(betas.len());
    let mut handles = Vec::with_capacity(betas.len());
    for (e, edge_betas) in betas.iter().enumerate() {
        let selected: Vec<usize> = match active {
            Some(a) => a[e].clone(),
            None => (0..edge_betas.len()).collect(),
        };
        let subset: Vec<f64> = selected.iter().map(|&t| edge_betas[t]).collect();
        let leaf = if trainable {
            g.param(Tensor::new(vec![subset.len()], subset)?)?
        } else {
            g.constant(Tensor::new(vec![subset.len()], subset)?)?
        };
        let alpha = g.softmax(leaf)?;
        let mut per_op = vec![None; edge_betas.len()];
        for (pos, &t) in selected.iter().enumerate() {
            per_op[t] = Some(g.index(alpha, pos)?);
        }
        weights.push(per_op);
        handles.push(SoftmaxEdgeHandle { leaf, selected });
    }
    Ok((weights, handles))
}

/// Handle for one sampled gate: the logit leaf and the uniform draw used.
pub struct GateHandle {
    pub leaf: ValueId,
    pub uniform: f64,
    pub edge: usize,
    pub op: usize,
}

/// Stochastic-gate mixing weights: one fresh sample per gate per call.
#[allow(clippy::too_many_arguments)]
pub fn gate_weight_nodes(
    g: &mut Graph,
    betas: &[Vec<f64>],
    tau: f64,
    a: f64,
    b: f64,
    active: Option<&[Vec<usize>]>,
    trainable: bool,
    rng: &mut impl Rng,
) -> Result<(EdgeWeights, Vec<GateHandle>), SupernetError> {
    let mut weights = Vec::with_capacity(betas.len());
    let mut handles = Vec::new();
    for (e, edge_betas) in betas.iter().enumerate() {
        let selected: Vec<usize> = match active {
            Some(act) => act[e].clone(),
            None => (0..edge_betas.len()).collect(),
        };
        let mut per_op = vec![None; edge_betas.len()];
        for &t in &selected {
            let uniform = loop {
                let d: f64 = rng.gen();
                if d > 0.0 && d < 1.0 {
                    break d;
                }
            };
            let leaf = if trainable {
                g.param(Tensor::scalar(edge_betas[t]))?
            } else {
                g.constant(Tensor::scalar(edge_betas[t]))?
            };
            per_op[t] = Some(gate_node(g, leaf, uniform, tau, a, b)?);
            handles.push(GateHandle {
                leaf,
                uniform,
                edge: e,
                op: t,
            });
        }
        weights.push(per_op);
    }
    Ok((weights, handles))
}

/// Max-subtracted softmax over plain values (no tape).
pub fn softmax_weights(betas: &[f64]) -> Vec<f64> {
    let max = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = betas.iter().map(|&b| (b - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Which nodes feed the prediction heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadScope {
    /// Sum of per-node inner products over every node (analysis form).
    AllNodes,
    /// Practical concat-style output: intermediate nodes only.
    IntermediateOnly,
}

impl Default for HeadScope {
    fn default() -> Self {
        HeadScope::AllNodes
    }
}

/// Forward pass of one cell on the tape.
///
/// Node 0..num_inputs are stem outputs; every later node sums the weighted
/// ops of all its incoming edges. Returns the node value ids.
pub fn forward_cell_nodes(
    g: &mut Graph,
    cell: &CellGraph,
    params: &ParamIds,
    inputs: &[ValueId],
    weights: &EdgeWeights,
    activation: Activation,
    stride2_stem: bool,
) -> Result<Vec<ValueId>, SupernetError> {
    if inputs.len() != cell.num_inputs {
        return Err(SupernetError::BadConfig(format!(
            "cell expects {} input(s), got {}",
            cell.num_inputs,
            inputs.len()
        )));
    }
    let mut nodes: Vec<ValueId> = Vec::with_capacity(cell.h);
    for (i, &x) in inputs.iter().enumerate() {
        // One stem per input node; every input shares the single stem tensor
        // in the collapsed single-input form.
        let _ = i;
        let mut stem_out = conv_op(g, params.stem, x, activation, None)?;
        if stride2_stem {
            stem_out = g.subsample_cols(stem_out, 2)?;
        }
        nodes.push(stem_out);
    }
    for l in cell.num_inputs..cell.h {
        let mut terms: Vec<ValueId> = Vec::new();
        for (e, edge) in cell.edges.iter().enumerate() {
            if edge.to != l {
                continue;
            }
            let src = nodes[edge.from];
            for (t, op) in edge.ops.iter().enumerate() {
                let Some(w) = weights[e][t] else { continue };
                let op_out = match op {
                    OperationKind::Zero => {
                        let shape = g.value(src).shape().to_vec();
                        g.constant(Tensor::zeros(shape))?
                    }
                    OperationKind::Skip => src,
                    OperationKind::Conv { .. } => {
                        let slot = cell.conv_slot(e, t).expect("conv op has a slot");
                        conv_op(g, params.convs[slot], src, activation, None)?
                    }
                    OperationKind::AvgPool { kernel } => g.avg_pool(src, *kernel)?,
                    OperationKind::MaxPool { kernel } => g.max_pool(src, *kernel)?,
                };
                terms.push(g.scalar_mul(w, op_out)?);
            }
        }
        let value = if terms.is_empty() {
            let shape = g.value(nodes[0]).shape().to_vec();
            g.constant(Tensor::zeros(shape))?
        } else {
            g.sum_nodes(&terms)?
        };
        nodes.push(value);
    }
    Ok(nodes)
}

/// Prediction: sum of inner products between heads and node values.
pub fn prediction(
    g: &mut Graph,
    heads: &[ValueId],
    nodes: &[ValueId],
    scope: HeadScope,
    num_inputs: usize,
) -> Result<ValueId, SupernetError> {
    let start = match scope {
        HeadScope::AllNodes => 0,
        HeadScope::IntermediateOnly => num_inputs,
    };
    let mut terms = Vec::new();
    for s in start..nodes.len() {
        terms.push(g.dot(heads[s], nodes[s])?);
    }
    Ok(g.sum_nodes(&terms)?)
}

/// Mean squared loss `1/(2n) * sum (u_i - y_i)^2` over scalar prediction nodes.
pub fn train_loss(
    g: &mut Graph,
    predictions: &[ValueId],
    targets: &[f64],
) -> Result<ValueId, SupernetError> {
    if predictions.is_empty() {
        return Err(SupernetError::EmptyBatch);
    }
    if predictions.len() != targets.len() {
        return Err(SupernetError::LengthMismatch(
            predictions.len(),
            targets.len(),
        ));
    }
    let n = predictions.len() as f64;
    let mut terms = Vec::with_capacity(predictions.len());
    for (&u, &y) in predictions.iter().zip(targets) {
        let d = g.affine(u, 1.0, -y)?;
        terms.push(g.mul(d, d)?);
    }
    let sum = g.sum_nodes(&terms)?;
    Ok(g.scale(sum, 1.0 / (2.0 * n))?)
}

/// Per-sample loss nodes `1/2 (u_i - y_i)^2`, used for Gram-matrix work.
pub fn per_sample_losses(
    g: &mut Graph,
    predictions: &[ValueId],
    targets: &[f64],
) -> Result<Vec<ValueId>, SupernetError> {
    let mut out = Vec::with_capacity(predictions.len());
    for (&u, &y) in predictions.iter().zip(targets) {
        let d = g.affine(u, 1.0, -y)?;
        let sq = g.mul(d, d)?;
        out.push(g.scale(sq, 0.5)?);
    }
    Ok(out)
}

/// Cell role inside a stacked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// Stacked-network configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub cells: usize,
    pub h: usize,
    pub num_inputs: usize,
    /// Positions of reduction cells (stride-2 stems), e.g. `[k/3, 2k/3]`.
    pub reduction_positions: Vec<usize>,
    pub dims: NetDims,
    pub activation: Activation,
    pub head_scope: HeadScope,
}

impl NetworkConfig {
    pub fn single_cell(h: usize, dims: NetDims, activation: Activation) -> Self {
        Self {
            cells: 1,
            h,
            num_inputs: 1,
            reduction_positions: vec![],
            dims,
            activation,
            head_scope: HeadScope::AllNodes,
        }
    }
}

/// Stacked network: cell `c + 1` consumes cell `c`'s last node. Heads are
/// attached to the final cell's nodes.
#[derive(Debug, Clone)]
pub struct MultiCellNetwork {
    pub config: NetworkConfig,
    pub cell: CellGraph,
    pub kinds: Vec<CellKind>,
    /// Spatial width entering each cell (reduction cells halve it).
    pub widths: Vec<usize>,
}

impl MultiCellNetwork {
    pub fn build(config: NetworkConfig, ops: &[OperationKind]) -> Result<Self, SupernetError> {
        if config.cells == 0 {
            return Err(SupernetError::BadConfig("need at least one cell".into()));
        }
        for &pos in &config.reduction_positions {
            if pos >= config.cells {
                return Err(SupernetError::BadConfig(format!(
                    "reduction position {pos} out of range for {} cells",
                    config.cells
                )));
            }
        }
        let cell = CellGraph::uniform(config.h, config.num_inputs, ops)?;
        let kinds: Vec<CellKind> = (0..config.cells)
            .map(|c| {
                if config.reduction_positions.contains(&c) {
                    CellKind::Reduction
                } else {
                    CellKind::Normal
                }
            })
            .collect();
        let mut widths = Vec::with_capacity(config.cells);
        let mut w = config.dims.p;
        for kind in &kinds {
            widths.push(w);
            if *kind == CellKind::Reduction {
                w = w.div_ceil(2);
            }
        }
        Ok(Self {
            config,
            cell,
            kinds,
            widths,
        })
    }

    pub fn has_reduction(&self) -> bool {
        self.kinds.contains(&CellKind::Reduction)
    }

    /// Output width of the last cell (head width).
    pub fn final_width(&self) -> usize {
        let mut w = self.config.dims.p;
        for kind in &self.kinds {
            if *kind == CellKind::Reduction {
                w = w.div_ceil(2);
            }
        }
        w
    }

    /// Gaussian-initialized parameters for every cell; heads live on the last.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<Vec<SuperNetParams>, SupernetError> {
        let mut out = Vec::with_capacity(self.config.cells);
        for c in 0..self.config.cells {
            let in_channels = if c == 0 {
                self.config.dims.in_channels
            } else {
                self.config.dims.m
            };
            let dims = NetDims {
                in_channels,
                m: self.config.dims.m,
                p: self.final_width(),
                stem_kernel: self.config.dims.stem_kernel,
            };
            let mut params = SuperNetParams::init_gaussian(&self.cell, &dims, rng)?;
            if c + 1 != self.config.cells {
                params.heads = Vec::new();
            }
            out.push(params);
        }
        Ok(out)
    }

    /// Forward through every cell; weight nodes are shared per cell kind so
    /// architecture parameters receive one accumulated gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[ParamIds],
        x: ValueId,
        normal_weights: &EdgeWeights,
        reduction_weights: Option<&EdgeWeights>,
    ) -> Result<ValueId, SupernetError> {
        let mut current = x;
        let mut last_nodes = Vec::new();
        for (c, kind) in self.kinds.iter().enumerate() {
            let weights = match kind {
                CellKind::Normal => normal_weights,
                CellKind::Reduction => reduction_weights.unwrap_or(normal_weights),
            };
            let nodes = forward_cell_nodes(
                g,
                &self.cell,
                &params[c],
                &vec![current; self.cell.num_inputs],
                weights,
                self.config.activation,
                *kind == CellKind::Reduction,
            )?;
            current = *nodes.last().expect("cell has nodes");
            last_nodes = nodes;
        }
        prediction(
            g,
            &params[self.config.cells - 1].heads,
            &last_nodes,
            self.config.head_scope,
            self.cell.num_inputs,
        )
    }
}

/// A batch of unit-norm inputs with scalar targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<f64>,
}

impl Batch {
    /// Check the unit-norm and pairwise non-parallel conditions.
    pub fn validate(&self) -> Result<(), SupernetError> {
        for (i, x) in self.inputs.iter().enumerate() {
            let norm = x.frobenius_norm();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(SupernetError::BadConfig(format!(
                    "input {i} has Frobenius norm {norm}, expected 1"
                )));
            }
        }
        for i in 0..self.inputs.len() {
            for j in (i + 1)..self.inputs.len() {
                let cos = self.inputs[i].dot(&self.inputs[j]).unwrap_or(f64::NAN);
                if cos.abs() >= 1.0 - 1e-6 {
                    return Err(SupernetError::BadConfig(format!(
                        "inputs {i} and {j} are near-parallel (cos {cos})"
                    )));
                }
            }
        }
        Ok(())
    }
}

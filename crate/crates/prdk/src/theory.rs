//! Convergence-analysis harness: the architecture-dependent rate factor, the
//! pairwise input matrix K and the per-sample-gradient Gram matrix, measured
//! per-step loss contraction, the shallow-vs-deep branch comparison, gate
//! sensitivity probes, and the skip-fraction convergence experiment.

use crate::autodiff::{per_sample_gradients, Activation, Graph};
use crate::dataio::{generate_synthetic, DataIoError, LabelModel};
use crate::supernet::{
    fixed_weight_nodes, forward_cell_nodes, per_sample_losses, prediction, train_loss, Batch,
    CellGraph, EdgeSpec, HeadScope, NetDims, OperationKind, SuperNetParams, SupernetError,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("branch comparison needs an even node count, got {0}")]
    OddNodeCount(usize),
    #[error("invalid theory config: {0}")]
    Config(String),
    #[error(transparent)]
    Supernet(#[from] SupernetError),
    #[error(transparent)]
    Data(#[from] DataIoError),
}

fn default_m() -> usize {
    32
}
fn default_p() -> usize {
    8
}
fn default_n() -> usize {
    4
}
fn default_in_channels() -> usize {
    4
}
fn default_k_c() -> usize {
    3
}
fn default_h() -> usize {
    4
}
fn default_steps() -> usize {
    40
}
fn default_trials() -> usize {
    5
}
fn default_archs() -> usize {
    20
}
fn default_c_sigma() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.375, 0.625]
}
fn default_activation() -> Activation {
    Activation::Softplus
}

/// Configuration for the analysis harness; doubles as its JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_k_c")]
    pub k_c: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Step size; tuned by halving when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_archs")]
    pub archs: usize,
    /// Convention constant in the rate formula; only relative statements are
    /// ever asserted.
    #[serde(default = "default_c_sigma")]
    pub c_sigma: f64,
    /// Upper index of the rate-formula sum; defaults to `h - 2`.
    #[serde(default)]
    pub lambda_sum_upper: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Weight-training steps taken before sensitivity probes.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Constant skip weight; random draws when absent.
    #[serde(default)]
    pub weight_skip: Option<f64>,
    /// Constant conv weight; random draws when absent.
    #[serde(default)]
    pub weight_conv: Option<f64>,
    /// Which edges the skip fraction is spent on.
    #[serde(default)]
    pub skip_placement: SkipPlacement,
    /// How the skip-fraction experiment realizes a fraction.
    #[serde(default)]
    pub skip_style: SkipFractionStyle,
}

/// Two readings of "a fraction of the operations are skips".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFractionStyle {
    /// Discrete cells: the fraction of edges carries a skip instead of a
    /// conv. Changes the learnable parameter set per fraction, which at
    /// desk scale confounds the rate comparison.
    DiscreteOps,
    /// Paired runs of one fixed cell where every edge mixes a unit-weight
    /// conv with a skip whose weight equals the fraction. Parameters and
    /// initialization are shared across fractions, isolating the skip
    /// strength as the only difference.
    SkipStrength,
}

impl Default for SkipFractionStyle {
    fn default() -> Self {
        SkipFractionStyle::SkipStrength
    }
}

fn default_warmup() -> usize {
    30
}

impl Default for TheoryConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl TheoryConfig {
    pub fn dims(&self) -> NetDims {
        NetDims {
            in_channels: self.in_channels,
            m: self.m,
            p: self.p,
            stem_kernel: self.k_c,
        }
    }

    pub fn dataset(&self) -> Result<crate::dataio::Dataset, TheoryError> {
        Ok(generate_synthetic(
            self.n,
            self.in_channels,
            self.p,
            &LabelModel::LinearTeacher,
            self.seed,
        )?)
    }
}

/// Per-edge skip and conv weights indexed `[to][from]` as full `h x h`
/// matrices; entries outside the DAG are simply unused by the formulas that
/// do not reference them.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchWeights {
    pub h: usize,
    pub skip: Vec<Vec<f64>>,
    pub conv: Vec<Vec<f64>>,
}

impl ArchWeights {
    pub fn constant(h: usize, skip: f64, conv: f64) -> Self {
        Self {
            h,
            skip: vec![vec![skip; h]; h],
            conv: vec![vec![conv; h]; h],
        }
    }

    pub fn random(h: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || (0..h).map(|_| (0..h).map(|_| rng.gen_range(lo..hi)).collect()).collect();
        Self {
            h,
            skip: draw(),
            conv: draw(),
        }
    }

    /// Per-edge `[zero, skip, conv]` values for the analysis op set.
    pub fn to_edge_values(&self, cell: &CellGraph) -> Vec<Vec<f64>> {
        cell.edges
            .iter()
            .map(|e| vec![0.0, self.skip[e.to][e.from], self.conv[e.to][e.from]])
            .collect()
    }
}

/// The architecture-dependent rate factor:
/// `(3 c_sigma / 4) * lambda_min_K * sum_s conv[h-1][s]^2 * prod_{t<s} skip[s][t]^2`
/// with the sum running to `upper` (default `h - 2`) and empty products
/// equal to one.
pub fn lambda_bound(
    weights: &ArchWeights,
    lambda_min_k: f64,
    c_sigma: f64,
    upper: Option<usize>,
) -> f64 {
    let h = weights.h;
    if h < 2 {
        return 0.0;
    }
    let upper = upper.unwrap_or(h - 2).min(h - 1);
    let mut total = 0.0;
    for s in 0..=upper {
        let direct = weights.conv[h - 1][s];
        let mut term = direct * direct;
        for t in 0..s {
            let w = weights.skip[s][t];
            term *= w * w;
        }
        total += term;
    }
    0.75 * c_sigma * lambda_min_k * total
}

/// Smallest eigenvalue of a symmetric 2x2 matrix `[[a, b], [b, d]]`.
fn min_eig_2x2(a: f64, b: f64, d: f64) -> f64 {
    let mean = 0.5 * (a + d);
    let half_diff = 0.5 * (a - d);
    mean - (half_diff * half_diff + b * b).sqrt()
}

/// Pairwise input-matrix eigenvalue summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMinResult {
    /// Exactly the printed block form `[[<i,j>, <i,j>], [<j,i>, <j,j>]]`.
    pub as_printed: f64,
    /// The symmetric Gram form `[[<i,i>, <i,j>], [<j,i>, <j,j>]]`.
    pub symmetric: f64,
    /// True when some pair is near-parallel, where values may drop to zero
    /// or below.
    pub near_parallel: bool,
}

/// Minimum over ordered sample pairs of the smallest 2x2 eigenvalue, in both
/// block conventions.
pub fn lambda_min_k(samples: &[Tensor]) -> KMinResult {
    let mut as_printed = f64::INFINITY;
    let mut symmetric = f64::INFINITY;
    let mut near_parallel = false;
    for i in 0..samples.len() {
        for j in 0..samples.len() {
            if i == j {
                continue;
            }
            let cij = samples[i].dot(&samples[j]).unwrap_or(f64::NAN);
            let cii = samples[i].dot(&samples[i]).unwrap_or(f64::NAN);
            let cjj = samples[j].dot(&samples[j]).unwrap_or(f64::NAN);
            if cij.abs() >= (cii * cjj).sqrt() * (1.0 - 1e-9) {
                near_parallel = true;
            }
            as_printed = as_printed.min(min_eig_2x2(cij, cij, cjj));
            symmetric = symmetric.min(min_eig_2x2(cii, cij, cjj));
        }
    }
    KMinResult {
        as_printed,
        symmetric,
        near_parallel,
    }
}

/// Smallest eigenvalue of a dense symmetric matrix by cyclic Jacobi sweeps.
pub fn symmetric_min_eigenvalue(matrix: &Tensor) -> f64 {
    let n = matrix.rows();
    debug_assert_eq!(n, matrix.cols());
    if n == 0 {
        return 0.0;
    }
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| matrix.at(i, j)).collect())
        .collect();
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for _ in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[i][j].abs());
            }
        }
        if off < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
}

/// Gram matrix of per-sample loss gradients over every network parameter.
#[derive(Debug, Clone)]
pub struct GramResult {
    pub matrix: Tensor,
    pub min_eigenvalue: f64,
    /// Length of each flattened per-sample gradient vector.
    pub vector_len: usize,
}

/// Per-sample gradient vectors in the documented flattening order (stem,
/// conv weights by destination then source, heads).
pub fn per_sample_gradient_vectors(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
) -> Result<Vec<Vec<f64>>, TheoryError> {
    let mut g = Graph::new();
    let ids = params.register(&mut g, true)?;
    let weights = fixed_weight_nodes(&mut g, edge_values, false)?;
    let mut preds = Vec::with_capacity(batch.inputs.len());
    for x in &batch.inputs {
        let xid = g.constant(x.clone()).map_err(SupernetError::from)?;
        let nodes =
            forward_cell_nodes(&mut g, cell, &ids, &[xid], &weights, activation, false)?;
        preds.push(prediction(&mut g, &ids.heads, &nodes, HeadScope::AllNodes, 1)?);
    }
    let losses = per_sample_losses(&mut g, &preds, &batch.targets)?;
    let ordered = params.ordered_ids(&ids);
    Ok(per_sample_gradients(&g, &losses, &ordered).map_err(SupernetError::from)?)
}

pub fn gram_matrix(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
) -> Result<GramResult, TheoryError> {
    let vectors = per_sample_gradient_vectors(cell, params, edge_values, batch, activation)?;
    let n = vectors.len();
    let mut matrix = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(&a, &b)| a * b)
                .sum();
            matrix.set(i, j, dot);
        }
    }
    let min_eigenvalue = symmetric_min_eigenvalue(&matrix);
    Ok(GramResult {
        matrix,
        min_eigenvalue,
        vector_len: vectors.first().map_or(0, |v| v.len()),
    })
}

/// Per-step training-loss ratios under plain gradient descent on the
/// network weights with the architecture fixed.
#[derive(Debug, Clone)]
pub struct ContractionResult {
    /// Loss before each step, then after the last one (steps + 1 entries).
    pub losses: Vec<f64>,
    /// `F(k+1) / F(k)` per step.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Geometric mean of the ratios.
    pub geo_mean_ratio: f64,
    /// True when the loss kept growing instead of contracting.
    pub diverged: bool,
}

pub fn measure_contraction(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
    eta: f64,
    steps: usize,
) -> Result<ContractionResult, TheoryError> {
    let mut params = params.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    let mut overflowed = false;
    for _ in 0..steps {
        // A numeric overflow is divergence: stop and report, never raise.
        match loss_and_grads(cell, &params, edge_values, batch, activation) {
            Ok((loss, grads)) => {
                losses.push(loss);
                params.gd_step(&grads, eta);
            }
            Err(_) => {
                overflowed = true;
                break;
            }
        }
    }
    if !overflowed {
        match loss_and_grads(cell, &params, edge_values, batch, activation) {
            Ok((final_loss, _)) => losses.push(final_loss),
            Err(_) => overflowed = true,
        }
    }
    let ratios: Vec<f64> = losses
        .windows(2)
        .map(|w| if w[0] == 0.0 { 1.0 } else { w[1] / w[0] })
        .collect();
    let max_ratio = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_mean =
        ratios.iter().map(|r| r.max(1e-300).ln()).sum::<f64>() / ratios.len().max(1) as f64;
    let geo_mean_ratio = log_mean.exp();
    let grew = ratios.iter().filter(|&&r| r > 1.0).count();
    Ok(ContractionResult {
        diverged: overflowed || grew * 2 > ratios.len(),
        losses,
        max_ratio,
        geo_mean_ratio,
        ratios,
    })
}

fn loss_and_grads(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
) -> Result<(f64, crate::supernet::ParamGrads), TheoryError> {
    let mut g = Graph::new();
    let ids = params.register(&mut g, true)?;
    let weights = fixed_weight_nodes(&mut g, edge_values, false)?;
    let mut preds = Vec::with_capacity(batch.inputs.len());
    for x in &batch.inputs {
        let xid = g.constant(x.clone()).map_err(SupernetError::from)?;
        let nodes =
            forward_cell_nodes(&mut g, cell, &ids, &[xid], &weights, activation, false)?;
        preds.push(prediction(&mut g, &ids.heads, &nodes, HeadScope::AllNodes, 1)?);
    }
    let loss = train_loss(&mut g, &preds, &batch.targets)?;
    let grads = g.backward(loss).map_err(SupernetError::from)?;
    Ok((
        g.value(loss).scalar_value(),
        params.collect_grads(&grads, &ids),
    ))
}

/// A few plain descent steps on the weights, with the step size halved until
/// the loss actually drops; used to probe sensitivities away from the
/// symmetric initialization.
pub fn loss_descent_warmup(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
    steps: usize,
) -> Result<SuperNetParams, TheoryError> {
    if steps == 0 {
        return Ok(params.clone());
    }
    let mut eta = 0.25;
    'retry: for _ in 0..30 {
        let mut trial = params.clone();
        let (mut prev, mut grads) = loss_and_grads(cell, &trial, edge_values, batch, activation)?;
        for _ in 0..steps {
            trial.gd_step(&grads, eta);
            let (next, g) = loss_and_grads(cell, &trial, edge_values, batch, activation)?;
            if !next.is_finite() || next > prev {
                eta *= 0.5;
                continue 'retry;
            }
            prev = next;
            grads = g;
        }
        return Ok(trial);
    }
    Ok(params.clone())
}

/// Halve the step size until a probe run contracts, then return it.
pub fn tune_eta(start: f64, mut probe: impl FnMut(f64) -> bool) -> f64 {
    let mut eta = start;
    for _ in 0..40 {
        if probe(eta) {
            return eta;
        }
        eta *= 0.5;
    }
    eta
}

/// Rate factors of the single-branch deep cell A and the two-branch shallow
/// cell B that reuses A's gate values, plus the ordering verdict.
pub fn compare_shallow_deep(
    weights: &ArchWeights,
    c_sigma: f64,
    lambda_min_k: f64,
) -> Result<(f64, f64, bool), TheoryError> {
    let h = weights.h;
    if h % 2 != 0 || h < 2 {
        return Err(TheoryError::OddNodeCount(h));
    }
    let lambda_a = lambda_bound(weights, lambda_min_k, c_sigma, None);
    let mut extra = 0.0;
    for s in (h / 2)..h {
        let direct = weights.conv[h - 1][s];
        let mut term = direct * direct;
        for t in (h / 2)..s {
            let w = weights.skip[s][t];
            term *= w * w;
        }
        extra += term;
    }
    let lambda_b = lambda_a + 0.75 * c_sigma * lambda_min_k * extra;
    Ok((lambda_a, lambda_b, lambda_b >= lambda_a))
}

/// Directional loss change of one gate with the weights held fixed.
#[derive(Debug, Clone, Copy)]
pub struct GateSensitivity {
    pub edge: usize,
    pub op_index: usize,
    pub op: OperationKind,
    pub finite_difference: f64,
    pub analytic: f64,
}

/// Finite-difference and analytic derivative of the batch loss with respect
/// to the mixing weight of one op.
pub fn gate_sensitivity(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
    edge: usize,
    op_index: usize,
    epsilon: f64,
) -> Result<GateSensitivity, TheoryError> {
    let eval = |values: &[Vec<f64>]| -> Result<f64, TheoryError> {
        let mut g = Graph::new();
        let ids = params.register(&mut g, false)?;
        let weights = fixed_weight_nodes(&mut g, values, false)?;
        let mut preds = Vec::with_capacity(batch.inputs.len());
        for x in &batch.inputs {
            let xid = g.constant(x.clone()).map_err(SupernetError::from)?;
            let nodes =
                forward_cell_nodes(&mut g, cell, &ids, &[xid], &weights, activation, false)?;
            preds.push(prediction(&mut g, &ids.heads, &nodes, HeadScope::AllNodes, 1)?);
        }
        let loss = train_loss(&mut g, &preds, &batch.targets)?;
        Ok(g.value(loss).scalar_value())
    };

    let mut bumped = edge_values.to_vec();
    bumped[edge][op_index] += epsilon;
    let finite_difference = (eval(&bumped)? - eval(edge_values)?) / epsilon;

    // Analytic derivative: weights become trainable leaves on the tape.
    let mut g = Graph::new();
    let ids = params.register(&mut g, false)?;
    let weights = fixed_weight_nodes(&mut g, edge_values, true)?;
    let mut preds = Vec::with_capacity(batch.inputs.len());
    for x in &batch.inputs {
        let xid = g.constant(x.clone()).map_err(SupernetError::from)?;
        let nodes = forward_cell_nodes(&mut g, cell, &ids, &[xid], &weights, activation, false)?;
        preds.push(prediction(&mut g, &ids.heads, &nodes, HeadScope::AllNodes, 1)?);
    }
    let loss = train_loss(&mut g, &preds, &batch.targets)?;
    let grads = g.backward(loss).map_err(SupernetError::from)?;
    let wid = weights[edge][op_index].expect("weight exists");
    let analytic = grads.get_or_zeros(wid, &[]).scalar_value();
    Ok(GateSensitivity {
        edge,
        op_index,
        op: cell.edges[edge].ops[op_index],
        finite_difference,
        analytic,
    })
}

/// Sensitivities of every gate in the cell.
pub fn gate_sensitivity_sweep(
    cell: &CellGraph,
    params: &SuperNetParams,
    edge_values: &[Vec<f64>],
    batch: &Batch,
    activation: Activation,
    epsilon: f64,
) -> Result<Vec<GateSensitivity>, TheoryError> {
    let mut out = Vec::new();
    for (e, edge) in cell.edges.iter().enumerate() {
        for t in 0..edge.ops.len() {
            out.push(gate_sensitivity(
                cell,
                params,
                edge_values,
                batch,
                activation,
                e,
                t,
                epsilon,
            )?);
        }
    }
    Ok(out)
}

/// Which edges a skip fraction is spent on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPlacement {
    /// Any edge may become a skip.
    AllEdges,
    /// Only shared internal edges; the private edges into the output node
    /// stay convolutional. Skips pay off on shared paths that feed a
    /// learnable final connection, and the rate formula assigns zero credit
    /// to a skip that replaces the final conv itself, so spending the
    /// fraction there inverts the effect being measured.
    InternalEdges,
}

impl Default for SkipPlacement {
    fn default() -> Self {
        SkipPlacement::InternalEdges
    }
}

/// One skip-fraction trial: a cell whose edges each carry exactly one op.
pub fn skip_fraction_cell(
    h: usize,
    fraction: f64,
    k_c: usize,
    placement: SkipPlacement,
    rng: &mut impl Rng,
) -> CellGraph {
    let template = CellGraph::uniform(h, 1, &[OperationKind::Conv { kernel: k_c }])
        .expect("h >= 1 template");
    let candidates: Vec<usize> = template
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| placement == SkipPlacement::AllEdges || e.to + 1 < h)
        .map(|(i, _)| i)
        .collect();
    let n_skip = (fraction * candidates.len() as f64).round() as usize;
    let mut order = candidates;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let skip_set: Vec<usize> = order.into_iter().take(n_skip).collect();
    let edges = template
        .edges
        .iter()
        .enumerate()
        .map(|(i, edge)| EdgeSpec {
            from: edge.from,
            to: edge.to,
            ops: if skip_set.contains(&i) {
                vec![OperationKind::Skip]
            } else {
                vec![OperationKind::Conv { kernel: k_c }]
            },
        })
        .collect();
    CellGraph::from_edges(h, 1, edges)
}

/// Loss curves per skip fraction, averaged over trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipFractionTable {
    pub fractions: Vec<f64>,
    /// `curves[f][trial][step]`, including the initial loss.
    pub curves: Vec<Vec<Vec<f64>>>,
    pub eta_used: f64,
}

impl SkipFractionTable {
    /// Mean final loss per fraction.
    pub fn mean_final_losses(&self) -> Vec<f64> {
        self.curves
            .iter()
            .map(|trials| {
                trials.iter().map(|c| *c.last().unwrap()).sum::<f64>() / trials.len() as f64
            })
            .collect()
    }

    /// Mean final loss per fraction with each curve normalized by its
    /// starting loss, which compares decay from matched starting points.
    pub fn mean_relative_final_losses(&self) -> Vec<f64> {
        self.curves
            .iter()
            .map(|trials| {
                trials
                    .iter()
                    .map(|c| c.last().unwrap() / c[0].max(1e-300))
                    .sum::<f64>()
                    / trials.len() as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        use crate::artifacts::fmt_f64 as f;
        let mut out = String::from("fraction,trial,step,loss\n");
        for (fi, fraction) in self.fractions.iter().enumerate() {
            for (trial, curve) in self.curves[fi].iter().enumerate() {
                for (step, loss) in curve.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        f(*fraction),
                        trial,
                        step,
                        f(*loss)
                    ));
                }
            }
        }
        out
    }

    /// Wide form: one mean loss-curve column per fraction.
    pub fn to_mean_csv(&self) -> String {
        use crate::artifacts::fmt_f64 as f;
        let mut out = String::from("step");
        for fraction in &self.fractions {
            out.push_str(&format!(",loss_frac_{}", f(*fraction)));
        }
        out.push('\n');
        let steps = self.curves.first().and_then(|t| t.first()).map_or(0, |c| c.len());
        for step in 0..steps {
            out.push_str(&step.to_string());
            for trials in &self.curves {
                let mean: f64 =
                    trials.iter().map(|c| c[step]).sum::<f64>() / trials.len() as f64;
                out.push_str(&format!(",{}", f(mean)));
            }
            out.push('\n');
        }
        out
    }
}

/// Train at each skip fraction and record loss curves.
///
/// `DiscreteOps` style draws a fresh cell per (fraction, trial) with the
/// fraction's share of edges set to skip. `SkipStrength` style trains one
/// fixed cell per trial and sweeps the skip weight, so the runs are paired:
/// parameters and initialization are identical across fractions.
pub fn skip_fraction_experiment(config: &TheoryConfig) -> Result<SkipFractionTable, TheoryError> {
    for &f in &config.fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(TheoryError::Config(format!(
                "fractions must lie in [0, 1], got {f}"
            )));
        }
    }
    let dataset = generate_synthetic(
        config.n,
        config.in_channels,
        config.p,
        &LabelModel::LinearTeacher,
        config.seed,
    )?;
    let batch = Batch {
        inputs: dataset.inputs(),
        targets: dataset.targets(),
    };
    let dims = config.dims();

    let strength_cell = CellGraph::uniform(
        config.h,
        1,
        &[
            OperationKind::Skip,
            OperationKind::Conv { kernel: config.k_c },
        ],
    )?;
    let setup = |fraction: f64, trial: u64| -> (CellGraph, SuperNetParams, Vec<Vec<f64>>) {
        match config.skip_style {
            SkipFractionStyle::DiscreteOps => {
                let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ (trial + 1));
                rng.set_stream(0x20);
                let cell = skip_fraction_cell(
                    config.h,
                    fraction,
                    config.k_c,
                    config.skip_placement,
                    &mut rng,
                );
                let params = SuperNetParams::init_gaussian(&cell, &dims, &mut rng).expect("init");
                let values = vec![vec![1.0]; cell.edges.len()];
                (cell, params, values)
            }
            SkipFractionStyle::SkipStrength => {
                // Fraction-independent draw: paired across fractions.
                let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ (trial + 1));
                rng.set_stream(0x20);
                let params = SuperNetParams::init_gaussian(&strength_cell, &dims, &mut rng)
                    .expect("init");
                let values = strength_cell
                    .edges
                    .iter()
                    .map(|_| vec![fraction, 1.0])
                    .collect();
                (strength_cell.clone(), params, values)
            }
        }
    };
    // Tune one shared step size over every (fraction, trial) instance.
    let eta = match config.eta {
        Some(e) => e,
        None => tune_eta(0.5, |eta| {
            config.fractions.iter().all(|&fraction| {
                (0..config.trials).all(|trial| {
                    let (cell, params, values) = setup(fraction, trial as u64);
                    match measure_contraction(
                        &cell,
                        &params,
                        &values,
                        &batch,
                        config.activation,
                        eta,
                        config.steps.min(10),
                    ) {
                        Ok(r) => !r.diverged && r.max_ratio < 1.0,
                        Err(_) => false,
                    }
                })
            })
        }),
    };

    let mut curves = Vec::with_capacity(config.fractions.len());
    for &fraction in &config.fractions {
        let mut trials = Vec::with_capacity(config.trials);
        for trial in 0..config.trials {
            let (cell, params, values) = setup(fraction, trial as u64);
            let result = measure_contraction(
                &cell,
                &params,
                &values,
                &batch,
                config.activation,
                eta,
                config.steps,
            )?;
            trials.push(result.losses);
        }
        curves.push(trials);
    }
    Ok(SkipFractionTable {
        fractions: config.fractions.clone(),
        curves,
        eta_used: eta,
    })
}

/// Spearman rank correlation with averaged ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap_or(std::cmp::Ordering::Equal));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = rank;
            }
            i = j + 1;
        }
        out
    };
    let ra = ranks(a);
    let rb = ranks(b);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..n {
        let xa = ra[i] - mean;
        let xb = rb[i] - mean;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

/// Result of the rate-vs-measured-contraction sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSweepResult {
    pub lambdas: Vec<f64>,
    pub geo_mean_ratios: Vec<f64>,
    /// Spearman correlation between the rate factor and the per-step loss
    /// reduction `1 - geo_mean_ratio`.
    pub spearman: f64,
    pub eta_used: f64,
}

/// Random architecture weightings at one width: rate factor vs measured
/// geometric-mean contraction.
///
/// The draws are controlled probes of the rate formula: every edge sits at
/// the uniform softmax operating point (each op weighted 1/3) and only the
/// coordinates the formula references are randomized, i.e. the conv weights
/// on edges into the last node and the skip weights on the shared prefix
/// paths. Randomizing the remaining coordinates as well confounds the
/// comparison: they move the measured rate through parameter blocks the
/// formula deliberately drops, and the ordering signal drowns.
pub fn lambda_contraction_sweep(config: &TheoryConfig) -> Result<LambdaSweepResult, TheoryError> {
    let dataset = config.dataset()?;
    let batch = Batch {
        inputs: dataset.inputs(),
        targets: dataset.targets(),
    };
    let cell = CellGraph::analysis(config.h)?;
    let dims = config.dims();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(0x30);
    let mut rng_init = ChaCha12Rng::seed_from_u64(config.seed);
    rng_init.set_stream(0x31);
    let params = SuperNetParams::init_gaussian(&cell, &dims, &mut rng_init)?;

    let h = config.h;
    let draws: Vec<ArchWeights> = (0..config.archs)
        .map(|_| {
            let mut w = ArchWeights::constant(h, 1.0 / 3.0, 1.0 / 3.0);
            for s in 0..h.saturating_sub(1) {
                w.conv[h - 1][s] = rng.gen_range(0.05..0.95);
            }
            for s in 1..h.saturating_sub(1) {
                for t in 0..s {
                    w.skip[s][t] = rng.gen_range(0.05..0.95);
                }
            }
            w
        })
        .collect();
    let lambdas: Vec<f64> = draws
        .iter()
        .map(|w| lambda_bound(w, 1.0, config.c_sigma, config.lambda_sum_upper))
        .collect();

    // One shared step size: the largest that keeps every run contracting.
    let eta = match config.eta {
        Some(e) => e,
        None => {
            tune_eta(1.0, |eta| {
                draws.iter().all(|w| {
                    let values = w.to_edge_values(&cell);
                    match measure_contraction(
                        &cell,
                        &params,
                        &values,
                        &batch,
                        config.activation,
                        eta,
                        8,
                    ) {
                        Ok(r) => !r.diverged && r.max_ratio < 1.0,
                        Err(_) => false,
                    }
                })
            }) / 2.0
        }
    };

    let mut geo_mean_ratios = Vec::with_capacity(draws.len());
    for w in &draws {
        let values = w.to_edge_values(&cell);
        let result = measure_contraction(
            &cell,
            &params,
            &values,
            &batch,
            config.activation,
            eta,
            config.steps,
        )?;
        geo_mean_ratios.push(result.geo_mean_ratio);
    }
    let reductions: Vec<f64> = geo_mean_ratios.iter().map(|r| 1.0 - r).collect();
    Ok(LambdaSweepResult {
        spearman: spearman(&lambdas, &reductions),
        lambdas,
        geo_mean_ratios,
        eta_used: eta,
    })
}

/// Summary document emitted by the analysis subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: String,
    pub mode: String,
    /// Convention constant; only ordering statements are asserted.
    pub c_sigma: f64,
    /// Lipschitz constant of the activation (metadata).
    pub mu: f64,
    /// Smoothness constant of the activation (metadata).
    pub rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_formula: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_min_k_as_printed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_min_k_symmetric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gram_min_eigenvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geo_mean_contraction_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_contraction_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_b: Option<f64>,
    pub verdicts: BTreeMap<String, bool>,
    pub notes: Vec<String>,
}

impl TheoryReport {
    pub fn new(mode: &str, config: &TheoryConfig) -> Self {
        Self {
            schema_version: "1".to_string(),
            mode: mode.to_string(),
            c_sigma: config.c_sigma,
            mu: config.activation.lipschitz(),
            rho: config.activation.smoothness(),
            lambda_formula: None,
            lambda_min_k_as_printed: None,
            lambda_min_k_symmetric: None,
            gram_min_eigenvalue: None,
            geo_mean_contraction_ratio: None,
            max_contraction_ratio: None,
            spearman: None,
            lambda_a: None,
            lambda_b: None,
            verdicts: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

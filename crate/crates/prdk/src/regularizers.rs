//! Group-structured sparsity on gate activation probabilities and the
//! path-depth reward, plus the combined search objective.

use crate::gates::{activation_probability, activation_probability_grad, GateState};
use crate::supernet::CellGraph;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("non-skip regularizer needs r >= 2 ops per edge, got {0}")]
    TooFewOps(usize),
    #[error("gate state count {got} does not match cell gate count {expected}")]
    StateCount { expected: usize, got: usize },
}

/// Partition of a cell's gates into the skip group and everything else.
#[derive(Debug, Clone)]
pub struct GroupPartition {
    /// Flat gate indices of skip ops.
    pub skip: Vec<usize>,
    /// Flat gate indices of all remaining ops.
    pub non_skip: Vec<usize>,
    /// Edge-count normalizer `2 / (h (h - 1))`.
    pub zeta: f64,
    /// Ops per edge.
    pub ops_per_edge: usize,
}

impl GroupPartition {
    pub fn from_cell(cell: &CellGraph) -> Self {
        let mut skip = Vec::new();
        let mut non_skip = Vec::new();
        for (e, edge) in cell.edges.iter().enumerate() {
            for (t, op) in edge.ops.iter().enumerate() {
                let flat = cell.flat_gate_index(e, t);
                if op.is_skip() {
                    skip.push(flat);
                } else {
                    non_skip.push(flat);
                }
            }
        }
        let h = cell.h as f64;
        let zeta = if cell.h > 1 { 2.0 / (h * (h - 1.0)) } else { 0.0 };
        GroupPartition {
            skip,
            non_skip,
            zeta,
            ops_per_edge: cell.edges.first().map_or(0, |e| e.ops.len()),
        }
    }
}

fn check_states(cell_gates: usize, states: &[GateState]) -> Result<(), RegularizerError> {
    if states.len() != cell_gates {
        return Err(RegularizerError::StateCount {
            expected: cell_gates,
            got: states.len(),
        });
    }
    Ok(())
}

/// Average activation probability of the skip group, scaled by `zeta`.
pub fn l_skip(partition: &GroupPartition, states: &[GateState]) -> f64 {
    partition.zeta
        * partition
            .skip
            .iter()
            .map(|&i| activation_probability(&states[i]))
            .sum::<f64>()
}

/// Gradient of [`l_skip`] with respect to every gate logit.
pub fn l_skip_grad(partition: &GroupPartition, states: &[GateState]) -> Vec<f64> {
    let mut out = vec![0.0; states.len()];
    for &i in &partition.skip {
        out[i] = partition.zeta * activation_probability_grad(&states[i]);
    }
    out
}

/// Average activation probability of the non-skip group, scaled by
/// `zeta / (r - 1)`.
pub fn l_non_skip(
    partition: &GroupPartition,
    states: &[GateState],
    r: usize,
) -> Result<f64, RegularizerError> {
    if r < 2 {
        return Err(RegularizerError::TooFewOps(r));
    }
    Ok(partition.zeta / (r as f64 - 1.0)
        * partition
            .non_skip
            .iter()
            .map(|&i| activation_probability(&states[i]))
            .sum::<f64>())
}

/// Gradient of [`l_non_skip`] with respect to every gate logit.
pub fn l_non_skip_grad(
    partition: &GroupPartition,
    states: &[GateState],
    r: usize,
) -> Result<Vec<f64>, RegularizerError> {
    if r < 2 {
        return Err(RegularizerError::TooFewOps(r));
    }
    let scale = partition.zeta / (r as f64 - 1.0);
    let mut out = vec![0.0; states.len()];
    for &i in &partition.non_skip {
        out[i] = scale * activation_probability_grad(&states[i]);
    }
    Ok(out)
}

/// Flat gate indices of the parameterized ops on each spine edge.
///
/// `path_ops` optionally restricts membership to the given op indices within
/// each edge's op list; by default every convolution op counts.
fn spine_factors(cell: &CellGraph, path_ops: Option<&[usize]>) -> Vec<Vec<usize>> {
    cell.spine_edges()
        .iter()
        .map(|&e| {
            cell.edges[e]
                .ops
                .iter()
                .enumerate()
                .filter(|(t, op)| match path_ops {
                    Some(allowed) => allowed.contains(t),
                    None => op.is_conv(),
                })
                .map(|(t, _)| cell.flat_gate_index(e, t))
                .collect()
        })
        .collect()
}

/// Probability that every consecutive node pair on the spine is connected by
/// a parameterized op: the product over spine edges of the summed activation
/// probabilities.
pub fn l_path(
    cell: &CellGraph,
    states: &[GateState],
    path_ops: Option<&[usize]>,
) -> Result<f64, RegularizerError> {
    check_states(cell.total_gates(), states)?;
    let mut product = 1.0;
    for member in spine_factors(cell, path_ops) {
        product *= member
            .iter()
            .map(|&i| activation_probability(&states[i]))
            .sum::<f64>();
    }
    Ok(product)
}

/// Gradient of [`l_path`] with respect to every gate logit.
pub fn l_path_grad(
    cell: &CellGraph,
    states: &[GateState],
    path_ops: Option<&[usize]>,
) -> Result<Vec<f64>, RegularizerError> {
    check_states(cell.total_gates(), states)?;
    let factors = spine_factors(cell, path_ops);
    let sums: Vec<f64> = factors
        .iter()
        .map(|member| {
            member
                .iter()
                .map(|&i| activation_probability(&states[i]))
                .sum()
        })
        .collect();
    let mut out = vec![0.0; states.len()];
    for (k, member) in factors.iter().enumerate() {
        let mut rest = 1.0;
        for (j, s) in sums.iter().enumerate() {
            if j != k {
                rest *= s;
            }
        }
        for &i in member {
            out[i] += rest * activation_probability_grad(&states[i]);
        }
    }
    Ok(out)
}

/// The full search objective:
/// `F_val + l1 * L_skip + l2 * L_non_skip - l3 * L_path`.
pub fn search_objective(
    f_val: f64,
    l_skip: f64,
    l_non_skip: f64,
    l_path: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> f64 {
    f_val + lambda1 * l_skip + lambda2 * l_non_skip - lambda3 * l_path
}

//! Discretization of a trained cell: keep the two best-scored non-zero
//! candidate ops per intermediate node, plus DOT rendering and a minimal
//! DOT reader for round-trip checks.

use crate::gates::{activation_probability, GateState};
use crate::supernet::{softmax_weights, CellGraph, OperationKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("node {0} has no non-zero candidate operations")]
    NoCandidates(usize),
    #[error("beta table does not match the cell: {0}")]
    BetaMismatch(String),
    #[error("malformed graph text at line {line}: {reason}")]
    DotParse { line: usize, reason: String },
}

/// How candidates are scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreMode {
    /// Per-edge softmax weight.
    Softmax,
    /// Gate activation probability at the given temperature and stretch.
    Gates { tau: f64, a: f64, b: f64 },
}

/// One retained operation on an intermediate node.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetainedOp {
    pub source: usize,
    pub op_index: usize,
    pub op: OperationKind,
    /// Provenance score (softmax weight or activation probability).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscreteNode {
    pub node: usize,
    pub retained: Vec<RetainedOp>,
}

/// A pruned cell: at most two retained ops per intermediate node.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscreteCell {
    pub h: usize,
    pub num_inputs: usize,
    pub nodes: Vec<DiscreteNode>,
}

/// Score every candidate `(edge, op)` of the cell under the given mode.
pub fn candidate_scores(
    cell: &CellGraph,
    betas: &[Vec<f64>],
    mode: ScoreMode,
) -> Result<Vec<Vec<f64>>, PruneError> {
    if betas.len() != cell.edges.len() {
        return Err(PruneError::BetaMismatch(format!(
            "{} beta rows for {} edges",
            betas.len(),
            cell.edges.len()
        )));
    }
    let mut scores = Vec::with_capacity(cell.edges.len());
    for (e, edge) in cell.edges.iter().enumerate() {
        if betas[e].len() != edge.ops.len() {
            return Err(PruneError::BetaMismatch(format!(
                "edge {e} has {} ops but {} betas",
                edge.ops.len(),
                betas[e].len()
            )));
        }
        let row = match mode {
            ScoreMode::Softmax => softmax_weights(&betas[e]),
            ScoreMode::Gates { tau, a, b } => betas[e]
                .iter()
                .map(|&beta| activation_probability(&GateState { beta, tau, a, b }))
                .collect(),
        };
        scores.push(row);
    }
    Ok(scores)
}

/// Keep the top two non-zero candidates per intermediate node, breaking
/// score ties by lower source index, then lower op index.
pub fn prune(
    cell: &CellGraph,
    betas: &[Vec<f64>],
    mode: ScoreMode,
) -> Result<DiscreteCell, PruneError> {
    let scores = candidate_scores(cell, betas, mode)?;
    let mut nodes = Vec::new();
    for node in cell.intermediate_nodes() {
        let mut candidates: Vec<RetainedOp> = Vec::new();
        for (e, edge) in cell.edges.iter().enumerate() {
            if edge.to != node {
                continue;
            }
            for (t, op) in edge.ops.iter().enumerate() {
                if op.is_zero() {
                    continue;
                }
                candidates.push(RetainedOp {
                    source: edge.from,
                    op_index: t,
                    op: *op,
                    score: scores[e][t],
                });
            }
        }
        if candidates.is_empty() {
            return Err(PruneError::NoCandidates(node));
        }
        candidates.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.source.cmp(&y.source))
                .then(x.op_index.cmp(&y.op_index))
        });
        candidates.truncate(2);
        nodes.push(DiscreteNode {
            node,
            retained: candidates,
        });
    }
    Ok(DiscreteCell {
        h: cell.h,
        num_inputs: cell.num_inputs,
        nodes,
    })
}

/// Fraction of retained ops that are skip connections.
pub fn skip_fraction(cell: &DiscreteCell) -> f64 {
    let total: usize = cell.nodes.iter().map(|n| n.retained.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let skips = cell
        .nodes
        .iter()
        .flat_map(|n| &n.retained)
        .filter(|r| r.op.is_skip())
        .count();
    skips as f64 / total as f64
}

/// Render as a DOT digraph: nodes labeled by index, edges labeled by op kind
/// and score.
pub fn export_dot(cell: &DiscreteCell) -> String {
    let mut out = String::new();
    out.push_str("digraph cell {\n");
    out.push_str("  rankdir=LR;\n");
    for node in 0..cell.h {
        out.push_str(&format!("  n{node} [label=\"{node}\"];\n"));
    }
    for node in &cell.nodes {
        for r in &node.retained {
            out.push_str(&format!(
                "  n{} -> n{} [label=\"{} ({:.6})\"];\n",
                r.source,
                node.node,
                r.op.label(),
                r.score
            ));
        }
    }
    out.push_str("}\n");
    out
}

/// Minimal reader for the DOT text emitted by [`export_dot`]: returns the
/// edge set as `(source, target, op label)` triples. Never panics on
/// malformed input.
pub fn parse_dot_edges(text: &str) -> Result<Vec<(usize, usize, String)>, PruneError> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let Some(arrow) = line.find("->") else {
            continue;
        };
        let parse_node = |s: &str| -> Option<usize> {
            s.trim().strip_prefix('n')?.parse().ok()
        };
        let from = parse_node(&line[..arrow]).ok_or(PruneError::DotParse {
            line: i + 1,
            reason: "bad source node".into(),
        })?;
        let rest = &line[arrow + 2..];
        let bracket = rest.find('[').ok_or(PruneError::DotParse {
            line: i + 1,
            reason: "missing attribute list".into(),
        })?;
        let to = parse_node(&rest[..bracket]).ok_or(PruneError::DotParse {
            line: i + 1,
            reason: "bad target node".into(),
        })?;
        let label_start = rest.find("label=\"").ok_or(PruneError::DotParse {
            line: i + 1,
            reason: "missing label".into(),
        })?;
        let after = &rest[label_start + 7..];
        let label_end = after.find('"').ok_or(PruneError::DotParse {
            line: i + 1,
            reason: "unterminated label".into(),
        })?;
        let label = &after[..label_end];
        let op = label.split(" (").next().unwrap_or(label).to_string();
        edges.push((from, to, op));
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gate_mode() -> ScoreMode {
        ScoreMode::Gates {
            tau: 1.0,
            a: -0.1,
            b: 1.1,
        }
    }

    fn beta_for_score(p: f64) -> f64 {
        // Invert the activation probability at tau = 1.
        (p / (1.0 - p)).ln() + (0.1f64 / 1.1).ln()
    }

    #[test]
    fn keeps_the_top_two_scores() {
        let cell = CellGraph::analysis(2).unwrap();
        // Single edge 0 -> 1, ops [zero, skip, conv].
        let betas = vec![vec![beta_for_score(0.9), beta_for_score(0.8), beta_for_score(0.1)]];
        let pruned = prune(&cell, &betas, gate_mode()).unwrap();
        assert_eq!(pruned.nodes.len(), 1);
        let kept = &pruned.nodes[0].retained;
        assert_eq!(kept.len(), 2);
        // Zero is excluded regardless of its score; skip (0.8) then conv (0.1).
        assert!(kept[0].op.is_skip());
        assert!((kept[0].score - 0.8).abs() < 1e-9);
        assert!(kept[1].op.is_conv());
    }

    #[test]
    fn exact_tie_prefers_lower_source_then_op_index() {
        let cell = CellGraph::analysis(3).unwrap();
        let b = beta_for_score(0.5);
        let betas = vec![vec![b; 3]; cell.edges.len()];
        let pruned = prune(&cell, &betas, gate_mode()).unwrap();
        // Node 2 has candidates from sources 0 and 1, two non-zero ops each,
        // all tied; the winners must be source 0's skip then source 0's conv.
        let node2 = pruned.nodes.iter().find(|n| n.node == 2).unwrap();
        assert_eq!(node2.retained[0].source, 0);
        assert_eq!(node2.retained[0].op_index, 1);
        assert_eq!(node2.retained[1].source, 0);
        assert_eq!(node2.retained[1].op_index, 2);
    }

    #[test]
    fn selection_matches_exhaustive_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        for _ in 0..50 {
            let cell = CellGraph::analysis(4).unwrap();
            let betas: Vec<Vec<f64>> = cell
                .edges
                .iter()
                .map(|e| (0..e.ops.len()).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let pruned = prune(&cell, &betas, gate_mode()).unwrap();
            let scores = candidate_scores(&cell, &betas, gate_mode()).unwrap();
            for node in &pruned.nodes {
                // Oracle: all candidates, full stable sort, take 2.
                let mut all: Vec<(f64, usize, usize)> = Vec::new();
                for (e, edge) in cell.edges.iter().enumerate() {
                    if edge.to != node.node {
                        continue;
                    }
                    for (t, op) in edge.ops.iter().enumerate() {
                        if !op.is_zero() {
                            all.push((scores[e][t], edge.from, t));
                        }
                    }
                }
                all.sort_by(|x, y| {
                    y.0.partial_cmp(&x.0)
                        .unwrap()
                        .then(x.1.cmp(&y.1))
                        .then(x.2.cmp(&y.2))
                });
                let expect: Vec<(usize, usize)> =
                    all.iter().take(2).map(|&(_, s, t)| (s, t)).collect();
                let got: Vec<(usize, usize)> =
                    node.retained.iter().map(|r| (r.source, r.op_index)).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn skip_fraction_examples() {
        let mk = |ops: &[OperationKind]| DiscreteCell {
            h: 2,
            num_inputs: 1,
            nodes: vec![DiscreteNode {
                node: 1,
                retained: ops
                    .iter()
                    .map(|&op| RetainedOp {
                        source: 0,
                        op_index: 0,
                        op,
                        score: 1.0,
                    })
                    .collect(),
            }],
        };
        assert_eq!(skip_fraction(&mk(&[OperationKind::Skip, OperationKind::Skip])), 1.0);
        assert_eq!(
            skip_fraction(&mk(&[
                OperationKind::Conv { kernel: 3 },
                OperationKind::AvgPool { kernel: 3 }
            ])),
            0.0
        );
        // 3 of 8.
        let mut ops = vec![OperationKind::Conv { kernel: 3 }; 5];
        ops.extend([OperationKind::Skip; 3]);
        assert_eq!(skip_fraction(&mk(&ops)), 0.375);
    }

    #[test]
    fn dot_round_trip_preserves_edge_set() {
        let cell = CellGraph::analysis(4).unwrap();
        let betas: Vec<Vec<f64>> = cell
            .edges
            .iter()
            .enumerate()
            .map(|(e, edge)| (0..edge.ops.len()).map(|t| (e + t) as f64 * 0.3 - 1.0).collect())
            .collect();
        let pruned = prune(&cell, &betas, ScoreMode::Softmax).unwrap();
        let dot = export_dot(&pruned);
        let parsed = parse_dot_edges(&dot).unwrap();
        let expect: Vec<(usize, usize, String)> = pruned
            .nodes
            .iter()
            .flat_map(|n| {
                n.retained
                    .iter()
                    .map(|r| (r.source, n.node, r.op.label()))
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(parsed, expect);
    }

    #[test]
    fn empty_intermediate_set_renders_header_only() {
        let cell = DiscreteCell {
            h: 1,
            num_inputs: 1,
            nodes: vec![],
        };
        let dot = export_dot(&cell);
        assert!(dot.starts_with("digraph cell {"));
        assert!(parse_dot_edges(&dot).unwrap().is_empty());
    }

    #[test]
    fn monotone_score_transform_leaves_selection_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(29);
        let cell = CellGraph::analysis(4).unwrap();
        let betas: Vec<Vec<f64>> = cell
            .edges
            .iter()
            .map(|e| (0..e.ops.len()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        // Gate scores are a strictly monotone transform of the logits, and
        // shifting every logit by a constant is another monotone transform.
        let shifted: Vec<Vec<f64>> = betas
            .iter()
            .map(|e| e.iter().map(|b| b + 0.7).collect())
            .collect();
        let p1 = prune(&cell, &betas, gate_mode()).unwrap();
        let p2 = prune(&cell, &shifted, gate_mode()).unwrap();
        let sel = |c: &DiscreteCell| -> Vec<(usize, usize, usize)> {
            c.nodes
                .iter()
                .flat_map(|n| {
                    n.retained
                        .iter()
                        .map(|r| (n.node, r.source, r.op_index))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        assert_eq!(sel(&p1), sel(&p2));
    }

    proptest! {
        // Invariants: no Zero retained, at most two per node, sources earlier.
        #[test]
        fn discrete_cell_invariants_hold(
            h in 2usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let cell = CellGraph::analysis(h).unwrap();
            let betas: Vec<Vec<f64>> = cell
                .edges
                .iter()
                .map(|e| (0..e.ops.len()).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            let mode = if seed % 2 == 0 { ScoreMode::Softmax } else { gate_mode() };
            let pruned = prune(&cell, &betas, mode).unwrap();
            prop_assert_eq!(pruned.nodes.len(), h - 1);
            for node in &pruned.nodes {
                prop_assert!(!node.retained.is_empty() && node.retained.len() <= 2);
                for r in &node.retained {
                    prop_assert!(!r.op.is_zero());
                    prop_assert!(r.source < node.node);
                }
            }
        }

        #[test]
        fn dot_reader_never_panics(text in ".*") {
            let _ = parse_dot_edges(&text);
        }
    }
}

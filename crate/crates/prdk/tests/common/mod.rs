//! Shared test oracles, independent of the library's autodiff path.
//!
//! `forward_oracle` recomputes the mixed-cell forward pass with straight-line
//! tensor arithmetic. `chain_rule_gradients` evaluates the closed-form
//! backward recursion for the analysis cell (zero/skip/conv edges, softplus,
//! per-node heads). Both deliberately avoid the `Graph` tape.

use prdk::autodiff::Activation;
use prdk::supernet::{CellGraph, OperationKind, SuperNetParams};
use prdk::tensor::{patches, patches_adjoint, Tensor};

/// Straight-line forward pass: node values and the prediction.
pub fn forward_oracle(
    cell: &CellGraph,
    params: &SuperNetParams,
    weights: &[Vec<f64>],
    x: &Tensor,
    activation: Activation,
) -> (Vec<Tensor>, f64) {
    let conv = |w: &Tensor, src: &Tensor| -> Tensor {
        let k_c = w.cols() / src.rows();
        let tau = 1.0 / (src.rows() as f64).sqrt();
        w.matmul(&patches(src, k_c).unwrap())
            .unwrap()
            .map(|v| activation.apply(v))
            .scale(tau)
    };
    let mut nodes: Vec<Tensor> = vec![conv(&params.stem, x)];
    for l in 1..cell.h {
        let mut acc = Tensor::zeros(nodes[0].shape().to_vec());
        for (e, edge) in cell.edges.iter().enumerate() {
            if edge.to != l {
                continue;
            }
            for (t, op) in edge.ops.iter().enumerate() {
                let w = weights[e][t];
                let term = match op {
                    OperationKind::Zero => continue,
                    OperationKind::Skip => nodes[edge.from].scale(w),
                    OperationKind::Conv { .. } => {
                        let slot = cell.conv_slot(e, t).unwrap();
                        conv(&params.convs[slot], &nodes[edge.from]).scale(w)
                    }
                    OperationKind::AvgPool { kernel } => {
                        pool_oracle(&nodes[edge.from], *kernel, false).scale(w)
                    }
                    OperationKind::MaxPool { kernel } => {
                        pool_oracle(&nodes[edge.from], *kernel, true).scale(w)
                    }
                };
                acc = acc.add(&term).unwrap();
            }
        }
        nodes.push(acc);
    }
    let mut u = 0.0;
    for (s, node) in nodes.iter().enumerate() {
        u += params.heads[s].dot(node).unwrap();
    }
    (nodes, u)
}

fn pool_oracle(src: &Tensor, k_c: usize, max: bool) -> Tensor {
    let (m, p) = (src.rows(), src.cols());
    let pad = (k_c - 1) / 2;
    let mut out = Tensor::zeros(vec![m, p]);
    for i in 0..m {
        for t in 0..p {
            let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
            for j in 0..k_c {
                let c = t as isize + j as isize - pad as isize;
                let v = if c >= 0 && (c as usize) < p {
                    src.at(i, c as usize)
                } else {
                    0.0
                };
                if max {
                    acc = acc.max(v);
                } else {
                    acc += v;
                }
            }
            out.set(i, t, if max { acc } else { acc / k_c as f64 });
        }
    }
    out
}

/// Gradients of `1/2 (u - y)^2` for one sample via the closed-form backward
/// recursion: sensitivities flow from the prediction into each node, back
/// through skip and conv edges, and into the stem, conv and head weights.
pub struct ChainRuleGrads {
    pub stem: Tensor,
    pub convs: Vec<Tensor>,
    pub heads: Vec<Tensor>,
}

pub fn chain_rule_gradients(
    cell: &CellGraph,
    params: &SuperNetParams,
    weights: &[Vec<f64>],
    x: &Tensor,
    y: f64,
    activation: Activation,
) -> ChainRuleGrads {
    let (nodes, u) = forward_oracle(cell, params, weights, x, activation);
    let residual = u - y;
    let h = cell.h;
    let tau_inner = 1.0 / (params.heads[0].rows() as f64).sqrt();

    // d loss / d X^(l), computed top-down:
    //   D_l = residual * U_l
    //       + sum over later nodes s of
    //           skip_w * D_s
    //         + conv_w * tau * patches_adjoint(W^T (sigma'(W phi(X_l)) .* D_s))
    let mut node_grads: Vec<Option<Tensor>> = vec![None; h];
    for l in (0..h).rev() {
        let mut d = params.heads[l].scale(residual);
        for (e, edge) in cell.edges.iter().enumerate() {
            if edge.from != l {
                continue;
            }
            let upstream = node_grads[edge.to].clone().expect("reverse order");
            for (t, op) in edge.ops.iter().enumerate() {
                let w = weights[e][t];
                match op {
                    OperationKind::Zero => {}
                    OperationKind::Skip => {
                        d = d.add(&upstream.scale(w)).unwrap();
                    }
                    OperationKind::Conv { .. } => {
                        let slot = cell.conv_slot(e, t).unwrap();
                        let wt = &params.convs[slot];
                        let k_c = wt.cols() / nodes[l].rows();
                        let ph = patches(&nodes[l], k_c).unwrap();
                        let pre = wt.matmul(&ph).unwrap();
                        let slope = pre.map(|v| activation.derivative(v));
                        let masked = slope.mul(&upstream).unwrap();
                        let back = wt.transpose().matmul(&masked).unwrap();
                        let scattered =
                            patches_adjoint(&back, nodes[l].rows(), nodes[l].cols(), k_c);
                        d = d.add(&scattered.scale(w * tau_inner)).unwrap();
                    }
                    OperationKind::AvgPool { .. } | OperationKind::MaxPool { .. } => {
                        panic!("chain-rule oracle covers the analysis op set only")
                    }
                }
            }
        }
        node_grads[l] = Some(d);
    }

    // Conv-weight gradients: w * tau * (sigma' .* D_to) phi(X_from)^T.
    let mut conv_grads = Vec::with_capacity(params.convs.len());
    for (slot, &(e, t)) in cell.conv_slots.iter().enumerate() {
        let edge = &cell.edges[e];
        let wt = &params.convs[slot];
        let src = &nodes[edge.from];
        let k_c = wt.cols() / src.rows();
        let ph = patches(src, k_c).unwrap();
        let pre = wt.matmul(&ph).unwrap();
        let slope = pre.map(|v| activation.derivative(v));
        let upstream = node_grads[edge.to].as_ref().unwrap();
        let masked = slope.mul(upstream).unwrap();
        let grad = masked.matmul(&ph.transpose()).unwrap();
        conv_grads.push(grad.scale(weights[e][t] * tau_inner));
    }

    // Stem gradient through X^(0).
    let stem_grad = {
        let k_c = params.stem.cols() / x.rows();
        let tau0 = 1.0 / (x.rows() as f64).sqrt();
        let ph = patches(x, k_c).unwrap();
        let pre = params.stem.matmul(&ph).unwrap();
        let slope = pre.map(|v| activation.derivative(v));
        let masked = slope.mul(node_grads[0].as_ref().unwrap()).unwrap();
        masked.matmul(&ph.transpose()).unwrap().scale(tau0)
    };

    let head_grads = nodes.iter().map(|n| n.scale(residual)).collect();
    ChainRuleGrads {
        stem: stem_grad,
        convs: conv_grads,
        heads: head_grads,
    }
}

/// Normalized deviation used throughout the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(1.0)
}

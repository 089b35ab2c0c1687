//! Versioned JSON documents for search state and pruned cells, with strict
//! import validation so untrusted files cannot crash the loader.

use crate::autodiff::Activation;
use crate::gates::TemperatureSchedule;
use crate::prune::DiscreteCell;
use crate::search::{SearchConfig, SearchMode, SearchState};
use crate::supernet::{
    CellGraph, HeadScope, MultiCellNetwork, NetDims, NetworkConfig, OperationKind, SuperNetParams,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0:?}, expected \"1\"")]
    Version(String),
    #[error("invalid document: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorDoc {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor, SchemaError> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(SchemaError::Invalid("tensor holds non-finite values".into()));
        }
        Tensor::new(self.shape.clone(), self.data.clone())
            .map_err(|e| SchemaError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParamsDoc {
    pub stem: TensorDoc,
    pub convs: Vec<TensorDoc>,
    pub heads: Vec<TensorDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConstantsDoc {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
}

/// Search output document: full architecture parameters, gate constants,
/// regularization constants and network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDoc {
    pub schema_version: String,
    pub mode: SearchMode,
    pub h: usize,
    pub num_inputs: usize,
    pub cells: usize,
    pub reduction_positions: Vec<usize>,
    pub op_set: Vec<OperationKind>,
    pub dims: NetDims,
    pub activation: Activation,
    pub head_scope: HeadScope,
    pub gate: GateConstantsDoc,
    pub temperature: TemperatureSchedule,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub betas_normal: Vec<Vec<f64>>,
    pub betas_reduction: Option<Vec<Vec<f64>>>,
    pub params: Vec<CellParamsDoc>,
}

pub fn state_to_doc(state: &SearchState, config: &SearchConfig) -> StateDoc {
    StateDoc {
        schema_version: SCHEMA_VERSION.to_string(),
        mode: config.mode,
        h: state.network.config.h,
        num_inputs: state.network.config.num_inputs,
        cells: state.network.config.cells,
        reduction_positions: state.network.config.reduction_positions.clone(),
        op_set: state.network.cell.edges.first().map(|e| e.ops.clone()).unwrap_or_default(),
        dims: state.network.config.dims,
        activation: state.network.config.activation,
        head_scope: state.network.config.head_scope,
        gate: GateConstantsDoc {
            a: config.gate_a,
            b: config.gate_b,
            tau: state.tau,
        },
        temperature: config.temperature,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        lambda3: config.lambda3,
        betas_normal: state.betas_normal.clone(),
        betas_reduction: state.betas_reduction.clone(),
        params: state
            .params
            .iter()
            .map(|p| CellParamsDoc {
                stem: TensorDoc::from_tensor(&p.stem),
                convs: p.convs.iter().map(TensorDoc::from_tensor).collect(),
                heads: p.heads.iter().map(TensorDoc::from_tensor).collect(),
            })
            .collect(),
    }
}

/// Validate a document and rebuild the runtime state.
pub fn doc_to_state(doc: &StateDoc) -> Result<SearchState, SchemaError> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(SchemaError::Version(doc.schema_version.clone()));
    }
    if doc.op_set.is_empty() {
        return Err(SchemaError::Invalid("empty op set".into()));
    }
    if !(doc.gate.a < 0.0 && doc.gate.b > 1.0 && doc.gate.tau > 0.0) {
        return Err(SchemaError::Invalid(format!(
            "gate constants out of range: a={}, b={}, tau={}",
            doc.gate.a, doc.gate.b, doc.gate.tau
        )));
    }
    if doc.dims.in_channels == 0 || doc.dims.m == 0 || doc.dims.p == 0 {
        return Err(SchemaError::Invalid("zero network dimension".into()));
    }
    if doc.dims.stem_kernel == 0 || doc.dims.stem_kernel % 2 == 0 {
        return Err(SchemaError::Invalid(format!(
            "stem kernel must be odd, got {}",
            doc.dims.stem_kernel
        )));
    }
    let net_config = NetworkConfig {
        cells: doc.cells,
        h: doc.h,
        num_inputs: doc.num_inputs,
        reduction_positions: doc.reduction_positions.clone(),
        dims: doc.dims,
        activation: doc.activation,
        head_scope: doc.head_scope,
    };
    let network = MultiCellNetwork::build(net_config, &doc.op_set)
        .map_err(|e| SchemaError::Invalid(e.to_string()))?;

    let check_betas = |betas: &Vec<Vec<f64>>| -> Result<(), SchemaError> {
        if betas.len() != network.cell.edges.len() {
            return Err(SchemaError::Invalid(format!(
                "{} beta rows for {} edges",
                betas.len(),
                network.cell.edges.len()
            )));
        }
        for (e, row) in betas.iter().enumerate() {
            if row.len() != network.cell.edges[e].ops.len() {
                return Err(SchemaError::Invalid(format!(
                    "edge {e}: {} betas for {} ops",
                    row.len(),
                    network.cell.edges[e].ops.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SchemaError::Invalid("non-finite beta".into()));
            }
        }
        Ok(())
    };
    check_betas(&doc.betas_normal)?;
    if network.has_reduction() != doc.betas_reduction.is_some() {
        return Err(SchemaError::Invalid(
            "reduction betas must be present exactly when reduction cells exist".into(),
        ));
    }
    if let Some(red) = &doc.betas_reduction {
        check_betas(red)?;
    }

    if doc.params.len() != doc.cells {
        return Err(SchemaError::Invalid(format!(
            "{} parameter blocks for {} cells",
            doc.params.len(),
            doc.cells
        )));
    }
    let mut params = Vec::with_capacity(doc.params.len());
    for (c, block) in doc.params.iter().enumerate() {
        if block.convs.len() != network.cell.conv_slots.len() {
            return Err(SchemaError::Invalid(format!(
                "cell {c}: {} conv tensors for {} conv slots",
                block.convs.len(),
                network.cell.conv_slots.len()
            )));
        }
        let expected_heads = if c + 1 == doc.cells { doc.h } else { 0 };
        if block.heads.len() != expected_heads {
            return Err(SchemaError::Invalid(format!(
                "cell {c}: {} head tensors, expected {expected_heads}",
                block.heads.len()
            )));
        }
        params.push(SuperNetParams {
            stem: block.stem.to_tensor()?,
            convs: block
                .convs
                .iter()
                .map(|t| t.to_tensor())
                .collect::<Result<_, _>>()?,
            heads: block
                .heads
                .iter()
                .map(|t| t.to_tensor())
                .collect::<Result<_, _>>()?,
        });
    }

    Ok(SearchState {
        network,
        params,
        betas_normal: doc.betas_normal.clone(),
        betas_reduction: doc.betas_reduction.clone(),
        tau: doc.gate.tau,
    })
}

pub fn state_to_json(doc: &StateDoc) -> String {
    serde_json::to_string_pretty(doc).expect("state serializes")
}

pub fn state_from_json(text: &str) -> Result<StateDoc, SchemaError> {
    let doc: StateDoc = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(SchemaError::Version(doc.schema_version));
    }
    Ok(doc)
}

/// Pruned-cell document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellDoc {
    pub schema_version: String,
    pub cell: DiscreteCell,
}

impl CellDoc {
    pub fn new(cell: DiscreteCell) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            cell,
        }
    }
}

pub fn cell_to_json(doc: &CellDoc) -> String {
    serde_json::to_string_pretty(doc).expect("cell serializes")
}

pub fn cell_from_json(text: &str) -> Result<CellDoc, SchemaError> {
    let doc: CellDoc = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(SchemaError::Version(doc.schema_version));
    }
    Ok(doc)
}

/// The uniform cell topology described by a state document.
pub fn doc_cell_graph(doc: &StateDoc) -> Result<CellGraph, SchemaError> {
    CellGraph::uniform(doc.h, doc.num_inputs, &doc.op_set)
        .map_err(|e| SchemaError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, LabelModel};
    use crate::search::run_search;

    fn small_state() -> (SearchState, SearchConfig) {
        let ds = generate_synthetic(8, 3, 5, &LabelModel::LinearTeacher, 11).unwrap();
        let config = SearchConfig {
            mode: SearchMode::Prdarts,
            seed: 3,
            epochs: 1,
            batch_size: 4,
            h: 3,
            width_m: 4,
            ..SearchConfig::default()
        };
        let (state, _) = run_search(&config, &ds).unwrap();
        (state, config)
    }

    #[test]
    fn export_import_export_is_byte_identical() {
        let (state, config) = small_state();
        let doc = state_to_doc(&state, &config);
        let text1 = state_to_json(&doc);
        let parsed = state_from_json(&text1).unwrap();
        let state2 = doc_to_state(&parsed).unwrap();
        let text2 = state_to_json(&state_to_doc(&state2, &config));
        assert_eq!(text1, text2);
    }

    #[test]
    fn schema_version_is_one_and_enforced() {
        let (state, config) = small_state();
        let doc = state_to_doc(&state, &config);
        assert_eq!(doc.schema_version, "1");
        let mut bad = doc;
        bad.schema_version = "2".to_string();
        let text = serde_json::to_string(&bad).unwrap();
        assert!(matches!(
            state_from_json(&text),
            Err(SchemaError::Version(_))
        ));
    }

    #[test]
    fn imported_state_reproduces_forward_outputs() {
        use crate::autodiff::Graph;
        use crate::supernet::fixed_weight_nodes;
        let (state, config) = small_state();
        let doc = state_to_doc(&state, &config);
        let text = state_to_json(&doc);
        let state2 = doc_to_state(&state_from_json(&text).unwrap()).unwrap();

        let ds = generate_synthetic(4, 3, 5, &LabelModel::LinearTeacher, 99).unwrap();
        let values: Vec<Vec<f64>> = state
            .betas_normal
            .iter()
            .map(|e| e.iter().map(|&b| crate::autodiff::sigmoid(b)).collect())
            .collect();
        let eval = |st: &SearchState| -> Vec<u64> {
            ds.samples
                .iter()
                .map(|(x, _)| {
                    let mut g = Graph::new();
                    let ids: Vec<_> = st
                        .params
                        .iter()
                        .map(|p| p.register(&mut g, false).unwrap())
                        .collect();
                    let xid = g.constant(x.clone()).unwrap();
                    let w = fixed_weight_nodes(&mut g, &values, false).unwrap();
                    let u = st.network.forward(&mut g, &ids, xid, &w, None).unwrap();
                    g.value(u).scalar_value().to_bits()
                })
                .collect()
        };
        assert_eq!(eval(&state), eval(&state2));
    }

    #[test]
    fn invalid_documents_are_rejected_not_panicked() {
        let (state, config) = small_state();
        let good = state_to_doc(&state, &config);

        let mut wrong_betas = good.clone();
        wrong_betas.betas_normal.pop();
        assert!(doc_to_state(&wrong_betas).is_err());

        let mut bad_gate = good.clone();
        bad_gate.gate.a = 0.5;
        assert!(doc_to_state(&bad_gate).is_err());

        let mut bad_dims = good.clone();
        bad_dims.dims.m = 0;
        assert!(doc_to_state(&bad_dims).is_err());

        let mut bad_params = good;
        bad_params.params.clear();
        assert!(doc_to_state(&bad_params).is_err());
    }

    #[test]
    fn cell_doc_round_trip() {
        use crate::prune::{prune, ScoreMode};
        let (state, _) = small_state();
        let pruned = prune(
            &state.network.cell,
            &state.betas_normal,
            ScoreMode::Gates {
                tau: state.tau,
                a: -0.1,
                b: 1.1,
            },
        )
        .unwrap();
        let doc = CellDoc::new(pruned);
        let text = cell_to_json(&doc);
        let back = cell_from_json(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(cell_to_json(&back), text);
    }
}

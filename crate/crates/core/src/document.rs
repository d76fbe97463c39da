//! JSON graph documents.
//!
//! ```json
//! { "unit": "KB",
//!   "inputs": [{"id": "x", "size": 8}],
//!   "operators": [{"id": "a", "name": "conv", "inputs": ["x"],
//!                  "output": {"id": "A", "size": 4}, "extra_size": 0}] }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ComputationGraph, GraphBuilder, GraphError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub id: String,
    pub size: i64,
}

/// An operator's `output` field. Arrays are accepted only so that
/// multi-output operators can be reported precisely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputDoc {
    One(TensorDoc),
    Many(Vec<TensorDoc>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorDoc {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub output: OutputDoc,
    #[serde(default)]
    pub extra_size: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub unit: String,
    #[serde(default)]
    pub inputs: Vec<TensorDoc>,
    pub operators: Vec<OperatorDoc>,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("malformed graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl GraphDocument {
    pub fn into_graph(self) -> Result<ComputationGraph, GraphError> {
        let mut b = GraphBuilder::new(self.unit);
        for t in self.inputs {
            b.input(t.id, t.size);
        }
        for op in self.operators {
            let outputs = match op.output {
                OutputDoc::One(t) => vec![(t.id, t.size)],
                OutputDoc::Many(ts) => ts.into_iter().map(|t| (t.id, t.size)).collect(),
            };
            let name = if op.name.is_empty() {
                op.id.clone()
            } else {
                op.name
            };
            b.raw_op(op.id, name, op.inputs, outputs, op.extra_size, false);
        }
        b.build()
    }

    pub fn from_graph(g: &ComputationGraph) -> Self {
        GraphDocument {
            unit: g.unit().to_string(),
            inputs: g
                .inputs()
                .iter()
                .map(|&t| TensorDoc {
                    id: g.tensor(t).id.clone(),
                    size: g.tensor(t).size,
                })
                .collect(),
            operators: g
                .ops()
                .iter()
                .map(|op| OperatorDoc {
                    id: op.id.clone(),
                    name: op.name.clone(),
                    inputs: op.inputs.iter().map(|&t| g.tensor(t).id.clone()).collect(),
                    output: OutputDoc::One(TensorDoc {
                        id: g.tensor(op.output).id.clone(),
                        size: g.tensor(op.output).size,
                    }),
                    extra_size: op.extra,
                })
                .collect(),
        }
    }
}

pub fn load_graph(json: &str) -> Result<ComputationGraph, LoadError> {
    let doc: GraphDocument = serde_json::from_str(json)?;
    Ok(doc.into_graph()?)
}

pub fn load_graph_file(path: impl AsRef<Path>) -> Result<ComputationGraph, LoadError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_graph(&text)
}

pub fn to_json(g: &ComputationGraph) -> String {
    serde_json::to_string_pretty(&GraphDocument::from_graph(g)).expect("graph documents serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = r#"{
        "unit": "KB",
        "inputs": [{"id": "x", "size": 8}],
        "operators": [
            {"id": "a", "name": "conv", "inputs": ["x"], "output": {"id": "A", "size": 4}},
            {"id": "b", "inputs": ["A"], "output": {"id": "B", "size": 2}, "extra_size": 0},
            {"id": "c", "inputs": ["B"], "output": {"id": "C", "size": 1}}
        ]
    }"#;

    #[test]
    fn loads_chain() {
        let g = load_graph(CHAIN).unwrap();
        assert_eq!(g.num_ops(), 3);
        assert_eq!(g.num_tensors(), 4);
        assert_eq!(g.op(0).name, "conv");
        assert_eq!(g.op(1).name, "b");
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let doc = CHAIN.replace(r#""inputs": ["x"]"#, r#""inputs": ["x", "C"]"#);
        assert!(matches!(
            load_graph(&doc),
            Err(LoadError::Graph(GraphError::CycleDetected { .. }))
        ));
    }

    #[test]
    fn rejects_multi_output_and_negative_sizes() {
        let multi = CHAIN.replace(
            r#""output": {"id": "B", "size": 2}"#,
            r#""output": [{"id": "B", "size": 2}, {"id": "B2", "size": 2}]"#,
        );
        assert!(matches!(
            load_graph(&multi),
            Err(LoadError::Graph(GraphError::MultiOutputOperator { outputs: 2, .. }))
        ));
        let neg = CHAIN.replace(r#""size": 8"#, r#""size": -8"#);
        assert!(matches!(
            load_graph(&neg),
            Err(LoadError::Graph(GraphError::NegativeSize { .. }))
        ));
        let dangling = CHAIN.replace(r#"["A"]"#, r#"["Q"]"#);
        assert!(matches!(
            load_graph(&dangling),
            Err(LoadError::Graph(GraphError::DanglingReference { .. }))
        ));
    }

    #[test]
    fn document_round_trip() {
        let g = load_graph(CHAIN).unwrap();
        assert_eq!(load_graph(&to_json(&g)).unwrap(), g);
    }
}

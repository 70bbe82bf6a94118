//! Circuit model file: one JSON document
//! `{schema_version, K, M, nodes: [{id, kind, children?, weight_logits?, var?, dist?}], root}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuit::{CategoricalLeaf, Circuit, DirichletLeaf, LeafDist, Node, NodeId, VarId};
use crate::error::{Error, Result};
use crate::json;

pub const CIRCUIT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CircuitDoc {
    pub schema_version: u32,
    #[serde(rename = "K")]
    pub num_classes: usize,
    #[serde(rename = "M")]
    pub num_modalities: usize,
    pub nodes: Vec<NodeDoc>,
    pub root: NodeId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: NodeId,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<DistDoc>,
}

/// `params` holds log-probabilities for categorical leaves and concentrations for Dirichlet leaves.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistDoc {
    pub family: String,
    pub params: Vec<f64>,
}

impl From<&Circuit> for CircuitDoc {
    fn from(c: &Circuit) -> Self {
        let nodes = c
            .nodes()
            .iter()
            .enumerate()
            .map(|(id, n)| match n {
                Node::Sum {
                    children,
                    weight_logits,
                } => NodeDoc {
                    id,
                    kind: "sum".into(),
                    children: Some(children.clone()),
                    weight_logits: Some(weight_logits.clone()),
                    var: None,
                    dist: None,
                },
                Node::Product { children } => NodeDoc {
                    id,
                    kind: "product".into(),
                    children: Some(children.clone()),
                    weight_logits: None,
                    var: None,
                    dist: None,
                },
                Node::Leaf { var, dist } => NodeDoc {
                    id,
                    kind: "leaf".into(),
                    children: None,
                    weight_logits: None,
                    var: Some(var.0),
                    dist: Some(match dist {
                        LeafDist::Categorical(cat) => DistDoc {
                            family: "categorical".into(),
                            params: cat.log_probs().to_vec(),
                        },
                        LeafDist::Dirichlet(d) => DistDoc {
                            family: "dirichlet".into(),
                            params: d.alpha().to_vec(),
                        },
                    }),
                },
            })
            .collect();
        CircuitDoc {
            schema_version: CIRCUIT_SCHEMA_VERSION,
            num_classes: c.num_classes(),
            num_modalities: c.num_modalities(),
            nodes,
            root: c.root(),
        }
    }
}

impl CircuitDoc {
    /// Rebuilds a circuit, re-ordering nodes topologically if needed, and runs the
    /// structural validators.
    pub fn into_circuit(self) -> Result<Circuit> {
        if self.schema_version != CIRCUIT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: CIRCUIT_SCHEMA_VERSION,
            });
        }
        let mut by_id: BTreeMap<NodeId, NodeDoc> = BTreeMap::new();
        for n in self.nodes {
            let id = n.id;
            if by_id.insert(id, n).is_some() {
                return Err(Error::MalformedCircuit(format!("duplicate node id {id}")));
            }
        }
        if !by_id.contains_key(&self.root) {
            return Err(Error::MalformedCircuit(format!("root {} is not a node", self.root)));
        }
        let order = topological_order(&by_id)?;
        let position: BTreeMap<NodeId, NodeId> = order.iter().enumerate().map(|(pos, id)| (*id, pos)).collect();

        let mut nodes = Vec::with_capacity(order.len());
        for id in &order {
            let doc = &by_id[id];
            let remap = |children: &Option<Vec<NodeId>>| -> Result<Vec<NodeId>> {
                children
                    .as_ref()
                    .ok_or_else(|| Error::MalformedCircuit(format!("node {id} lacks children")))
                    .map(|cs| cs.iter().map(|c| position[c]).collect())
            };
            let node = match doc.kind.as_str() {
                "sum" => Node::Sum {
                    children: remap(&doc.children)?,
                    weight_logits: doc
                        .weight_logits
                        .clone()
                        .ok_or_else(|| Error::MalformedCircuit(format!("sum node {id} lacks weight_logits")))?,
                },
                "product" => Node::Product {
                    children: remap(&doc.children)?,
                },
                "leaf" => {
                    let var = doc
                        .var
                        .ok_or_else(|| Error::MalformedCircuit(format!("leaf {id} lacks var")))?;
                    let dist = doc
                        .dist
                        .as_ref()
                        .ok_or_else(|| Error::MalformedCircuit(format!("leaf {id} lacks dist")))?;
                    let dist = match dist.family.as_str() {
                        "categorical" => LeafDist::Categorical(CategoricalLeaf::from_log_probs(dist.params.clone())?),
                        "dirichlet" => LeafDist::Dirichlet(DirichletLeaf::new(dist.params.clone())?),
                        other => return Err(Error::MalformedCircuit(format!("unknown leaf family {other:?}"))),
                    };
                    Node::Leaf { var: VarId(var), dist }
                }
                other => return Err(Error::MalformedCircuit(format!("unknown node kind {other:?}"))),
            };
            nodes.push(node);
        }
        let circuit = Circuit::new(nodes, position[&self.root], self.num_classes, self.num_modalities)?;
        circuit.validate()?;
        Ok(circuit)
    }
}

/// Depth-first post-order over nodes in ascending id; an order that is already topological
/// comes back unchanged. A back edge means a cycle.
fn topological_order(by_id: &BTreeMap<NodeId, NodeDoc>) -> Result<Vec<NodeId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let mut marks: BTreeMap<NodeId, Mark> = BTreeMap::new();
    let mut order = Vec::with_capacity(by_id.len());
    for &start in by_id.keys() {
        if marks.contains_key(&start) {
            continue;
        }
        // (node, index of the next child to visit)
        let mut stack = vec![(start, 0usize)];
        marks.insert(start, Mark::Open);
        while let Some(&mut (id, ref mut next)) = stack.last_mut() {
            let children = by_id[&id].children.as_deref().unwrap_or(&[]);
            if let Some(&c) = children.get(*next) {
                *next += 1;
                if !by_id.contains_key(&c) {
                    return Err(Error::MalformedCircuit(format!(
                        "node {id} references missing node {c}"
                    )));
                }
                match marks.get(&c) {
                    Some(Mark::Open) => return Err(Error::Cycle),
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(c, Mark::Open);
                        stack.push((c, 0));
                    }
                }
            } else {
                marks.insert(id, Mark::Done);
                order.push(id);
                stack.pop();
            }
        }
    }
    Ok(order)
}

pub fn circuit_to_json(circuit: &Circuit) -> Result<String> {
    json::to_string_pretty(&CircuitDoc::from(circuit))
}

pub fn circuit_from_json(text: &str) -> Result<Circuit> {
    let doc: CircuitDoc = serde_json::from_str(text)?;
    doc.into_circuit()
}

/// Writes a validated circuit to `path`.
pub fn save_circuit(circuit: &Circuit, path: impl AsRef<Path>) -> Result<()> {
    circuit.validate()?;
    std::fs::write(path, circuit_to_json(circuit)? + "\n")?;
    Ok(())
}

pub fn load_circuit(path: impl AsRef<Path>) -> Result<Circuit> {
    circuit_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_fusion_circuit, InitConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let c = build_fusion_circuit(3, 4, 5, 7, &InitConfig::default()).unwrap();
        let back = circuit_from_json(&circuit_to_json(&c).unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(
            c.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn cyclic_references_are_rejected() {
        let c = build_fusion_circuit(1, 2, 1, 0, &InitConfig::default()).unwrap();
        let mut doc = CircuitDoc::from(&c);
        // product (id 2) now also depends on the root (id 3)
        doc.nodes[2].children.as_mut().unwrap().push(3);
        assert!(matches!(doc.into_circuit(), Err(Error::Cycle)));
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let c = build_fusion_circuit(1, 2, 1, 0, &InitConfig::default()).unwrap();
        let mut doc = CircuitDoc::from(&c);
        doc.schema_version = 99;
        assert!(matches!(
            doc.into_circuit(),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn out_of_order_ids_are_reordered() {
        let c = build_fusion_circuit(2, 3, 2, 3, &InitConfig::default()).unwrap();
        let mut doc = CircuitDoc::from(&c);
        doc.nodes.reverse();
        assert_eq!(doc.into_circuit().unwrap(), c);
    }

    #[test]
    fn non_decomposable_file_fails_validation() {
        let c = build_fusion_circuit(1, 2, 1, 0, &InitConfig::default()).unwrap();
        let mut doc = CircuitDoc::from(&c);
        doc.nodes[1].var = Some(0);
        doc.nodes[1].dist = doc.nodes[0].dist.clone();
        assert!(matches!(doc.into_circuit(), Err(Error::Validation(_))));
    }

    #[test]
    fn reals_are_written_with_seventeen_digits() {
        let c = build_fusion_circuit(1, 2, 1, 0, &InitConfig::default()).unwrap();
        let text = circuit_to_json(&c).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["K"], 2);
        assert!(text.contains("e-1") || text.contains("e0"));
    }
}

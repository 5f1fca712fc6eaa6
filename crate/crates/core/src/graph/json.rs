//! JSON encodings of graphs and subgraphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DFGPlus, Direction, Edge, Label, Node, NodeKind, Relation, SubgraphSample, SupportMaps};

#[derive(Debug, Error)]
pub enum GraphFormatError {
    #[error("invalid graph JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid graph: {0}")]
    Schema(String),
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: u32,
    kind: String,
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    s: u32,
    d: u32,
    rel: String,
}

#[derive(Serialize, Deserialize)]
struct MapsJson {
    node_to_insn: Vec<u64>,
    node_to_seq: Vec<u64>,
    node_to_addr: Vec<(u32, u64, u32)>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
    maps: MapsJson,
}

#[derive(Serialize, Deserialize)]
struct SubgraphJson {
    origin: usize,
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
    sample_ids: Vec<u32>,
    carried_norms: Vec<(u32, String, String, u32)>,
}

fn schema(msg: impl Into<String>) -> GraphFormatError {
    GraphFormatError::Schema(msg.into())
}

fn label_code(l: Label) -> Option<String> {
    match l {
        Label::Benign => Some("benign".into()),
        Label::Vulnerable => Some("vuln".into()),
        Label::Unlabeled => None,
    }
}

fn parse_label(s: &Option<String>) -> Result<Label, GraphFormatError> {
    match s.as_deref() {
        None => Ok(Label::Unlabeled),
        Some("benign") => Ok(Label::Benign),
        Some("vuln") => Ok(Label::Vulnerable),
        Some(other) => Err(schema(format!("unknown label `{other}`"))),
    }
}

fn node_json(n: &Node) -> NodeJson {
    NodeJson { id: n.id, kind: n.kind.code().into(), label: label_code(n.label) }
}

fn edge_json(e: &Edge) -> EdgeJson {
    EdgeJson { s: e.src, d: e.dst, rel: e.rel.code().into() }
}

fn parse_node(n: &NodeJson) -> Result<Node, GraphFormatError> {
    Ok(Node {
        id: n.id,
        kind: NodeKind::from_code(&n.kind).ok_or_else(|| schema(format!("unknown node kind `{}`", n.kind)))?,
        label: parse_label(&n.label)?,
    })
}

fn parse_edge(e: &EdgeJson) -> Result<Edge, GraphFormatError> {
    Ok(Edge {
        src: e.s,
        dst: e.d,
        rel: Relation::from_code(&e.rel).ok_or_else(|| schema(format!("unknown relation `{}`", e.rel)))?,
    })
}

pub fn serialize_graph(g: &DFGPlus, m: &SupportMaps) -> String {
    let doc = GraphJson {
        nodes: g.nodes.iter().map(node_json).collect(),
        edges: g.edges.iter().map(edge_json).collect(),
        maps: MapsJson {
            node_to_insn: m.node_to_insn.clone(),
            node_to_seq: m.node_to_seq.clone(),
            node_to_addr: m.node_to_addr.clone(),
        },
    };
    serde_json::to_string(&doc).expect("graph serializes")
}

/// Parses and validates a graph document.
pub fn load_graph(text: &str) -> Result<(DFGPlus, SupportMaps), GraphFormatError> {
    let doc: GraphJson = serde_json::from_str(text)?;
    let g = DFGPlus {
        nodes: doc.nodes.iter().map(parse_node).collect::<Result<_, _>>()?,
        edges: doc.edges.iter().map(parse_edge).collect::<Result<_, _>>()?,
    };
    g.validate().map_err(schema)?;
    let maps = SupportMaps {
        node_to_insn: doc.maps.node_to_insn,
        node_to_seq: doc.maps.node_to_seq,
        node_to_addr: doc.maps.node_to_addr,
    };
    if maps.node_to_insn.len() != g.len() || maps.node_to_seq.len() != g.len() {
        return Err(schema("support maps do not cover every node"));
    }
    if !maps.node_to_addr.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(schema("node_to_addr must be sorted by id without repeats"));
    }
    let with_addr: BTreeSet<u32> = maps.node_to_addr.iter().map(|e| e.0).collect();
    for n in &g.nodes {
        let memory = matches!(n.kind, NodeKind::MNode | NodeKind::ENode);
        if memory != with_addr.contains(&n.id) {
            return Err(schema(format!("node {} has an inconsistent address entry", n.id)));
        }
    }
    Ok((g, maps))
}

fn dir_code(d: Direction) -> &'static str {
    match d {
        Direction::In => "in",
        Direction::Out => "out",
    }
}

pub fn serialize_subgraphs(subs: &[SubgraphSample]) -> String {
    let docs: Vec<SubgraphJson> = subs
        .iter()
        .map(|s| SubgraphJson {
            origin: s.origin,
            nodes: s
                .nodes
                .iter()
                .zip(s.kinds.iter().zip(&s.labels))
                .map(|(&id, (&kind, &label))| node_json(&Node { id, kind, label }))
                .collect(),
            edges: s.edges.iter().map(edge_json).collect(),
            sample_ids: s.sample_ids.clone(),
            carried_norms: s
                .carried_norms
                .iter()
                .map(|(&(n, r, d), &c)| (n, r.code().to_string(), dir_code(d).to_string(), c))
                .collect(),
        })
        .collect();
    serde_json::to_string(&docs).expect("subgraphs serialize")
}

pub fn load_subgraphs(text: &str) -> Result<Vec<SubgraphSample>, GraphFormatError> {
    let docs: Vec<SubgraphJson> = serde_json::from_str(text)?;
    docs.into_iter()
        .map(|d| {
            let nodes: Vec<Node> = d.nodes.iter().map(parse_node).collect::<Result<_, _>>()?;
            if !nodes.windows(2).all(|w| w[0].id < w[1].id) {
                return Err(schema("subgraph nodes must be sorted by id"));
            }
            let ids: BTreeSet<u32> = nodes.iter().map(|n| n.id).collect();
            let edges: Vec<Edge> = d.edges.iter().map(parse_edge).collect::<Result<_, _>>()?;
            if edges.iter().any(|e| !ids.contains(&e.src) || !ids.contains(&e.dst)) {
                return Err(schema("subgraph edge leaves the node set"));
            }
            let samples: BTreeSet<u32> = d.sample_ids.iter().copied().collect();
            if !samples.is_subset(&ids) {
                return Err(schema("sample id outside the node set"));
            }
            let mut carried_norms = BTreeMap::new();
            for (n, r, dir, c) in d.carried_norms {
                let rel = Relation::from_code(&r).ok_or_else(|| schema(format!("unknown relation `{r}`")))?;
                let dir = match dir.as_str() {
                    "in" => Direction::In,
                    "out" => Direction::Out,
                    other => return Err(schema(format!("unknown direction `{other}`"))),
                };
                carried_norms.insert((n, rel, dir), c);
            }
            Ok(SubgraphSample {
                origin: d.origin,
                sample_ids: samples.iter().copied().collect(),
                support_ids: ids.difference(&samples).copied().collect(),
                nodes: nodes.iter().map(|n| n.id).collect(),
                kinds: nodes.iter().map(|n| n.kind).collect(),
                labels: nodes.iter().map(|n| n.label).collect(),
                edges,
                carried_norms,
            })
        })
        .collect()
}

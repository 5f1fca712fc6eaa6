//! DFG+: a multi-relational data-flow graph over live variables.
//!
//! Each node is one value instance (a live variable) from its definition until
//! it is overwritten. Edges record direct flow, spatial adjacency, indexing,
//! redefinition and comparison. The graph itself carries no addresses or
//! values; those live in [`SupportMaps`] and are only used to map predictions
//! back to instructions.

mod build;
mod cut;
mod json;
mod restore;

pub use build::{build_graph, BuildError};
pub use cut::{cut, select_samples, select_samples_pooled, CutError, Direction, SubgraphSample};
pub use json::{load_graph, load_subgraphs, serialize_graph, serialize_subgraphs, GraphFormatError};
pub use restore::{map_overflow_byte, restore_adjacent, RestoreError, Toward};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    /// Value stored in memory.
    MNode,
    /// Value held in a register or the flags.
    RNode,
    /// Immediate operand.
    INode,
    /// Bytes supplied by a system call.
    ENode,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [NodeKind::MNode, NodeKind::RNode, NodeKind::INode, NodeKind::ENode];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        ["m", "r", "i", "e"][self.index()]
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    /// Direct information flow.
    DEdge,
    /// Lower-address variable to the adjacent higher-address one.
    AEdge,
    /// Index or pointer used to address a variable.
    IEdge,
    /// Earlier value covered by a redefinition.
    REdge,
    /// Operand compared into the flags.
    CEdge,
}

impl Relation {
    pub const ALL: [Relation; 5] =
        [Relation::DEdge, Relation::AEdge, Relation::IEdge, Relation::REdge, Relation::CEdge];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        ["d", "a", "i", "r", "c"][self.index()]
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Vulnerable,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub kind: NodeKind,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    pub rel: Relation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DFGPlus {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// Side tables linking nodes back to the execution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportMaps {
    /// Instruction address of the record that defined (or first read) a node.
    pub node_to_insn: Vec<u64>,
    pub node_to_seq: Vec<u64>,
    /// `(id, address, size)` for memory-backed nodes, sorted by id. Addresses
    /// are the restored ones, so an overflowing write reports the variable it
    /// corrupted rather than a redzone byte.
    pub node_to_addr: Vec<(u32, u64, u32)>,
}

impl SupportMaps {
    pub fn addr(&self, id: u32) -> Option<(u64, u32)> {
        self.node_to_addr
            .binary_search_by_key(&id, |e| e.0)
            .ok()
            .map(|i| (self.node_to_addr[i].1, self.node_to_addr[i].2))
    }
}

/// Number of node features in kind one-hot mode.
pub const FEATURE_DIM: usize = 4;

impl DFGPlus {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.nodes.iter().all(|n| n.label != Label::Unlabeled)
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.nodes.iter().filter(|n| n.label == label).count()
    }

    /// `deg[node][rel]` for incoming and outgoing edges.
    pub fn degrees(&self) -> (Vec<[u32; Relation::COUNT]>, Vec<[u32; Relation::COUNT]>) {
        let mut din = vec![[0u32; Relation::COUNT]; self.len()];
        let mut dout = vec![[0u32; Relation::COUNT]; self.len()];
        for e in &self.edges {
            din[e.dst as usize][e.rel.index()] += 1;
            dout[e.src as usize][e.rel.index()] += 1;
        }
        (din, dout)
    }

    /// The same graph restricted to direct-flow edges.
    pub fn dflow_only(&self) -> DFGPlus {
        DFGPlus {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().copied().filter(|e| e.rel == Relation::DEdge).collect(),
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id as usize != i {
                return Err(format!("node ids are not dense: position {i} holds id {}", n.id));
            }
        }
        let mut seen = HashSet::new();
        let mut has_dedge = vec![false; self.len()];
        for e in &self.edges {
            if e.src as usize >= self.len() || e.dst as usize >= self.len() {
                return Err(format!("edge {}->{} references a missing node", e.src, e.dst));
            }
            if e.src == e.dst {
                return Err(format!("self-loop on node {}", e.src));
            }
            if !seen.insert(*e) {
                return Err(format!("duplicate {} edge {}->{}", e.rel.code(), e.src, e.dst));
            }
            if e.rel == Relation::DEdge {
                has_dedge[e.dst as usize] = true;
            }
            if e.rel == Relation::AEdge
                && (self.nodes[e.src as usize].kind != NodeKind::MNode
                    || self.nodes[e.dst as usize].kind != NodeKind::MNode)
            {
                return Err(format!("adjacency edge {}->{} between non-memory nodes", e.src, e.dst));
            }
        }
        for n in &self.nodes {
            if n.label == Label::Vulnerable && (n.kind != NodeKind::MNode || !has_dedge[n.id as usize]) {
                return Err(format!(
                    "vulnerable node {} must be a memory node with an incoming direct-flow edge",
                    n.id
                ));
            }
        }
        Ok(())
    }

    /// Renumbers nodes by `perm` (old id -> new id).
    pub fn permuted(&self, perm: &[u32]) -> DFGPlus {
        let mut nodes = self.nodes.clone();
        for n in &self.nodes {
            let id = perm[n.id as usize];
            nodes[id as usize] = Node { id, ..*n };
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge { src: perm[e.src as usize], dst: perm[e.dst as usize], rel: e.rel })
            .collect();
        DFGPlus { nodes, edges }
    }
}

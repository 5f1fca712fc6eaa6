#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sbof_core::graph::{Edge, Label, Node, NodeKind, Relation};
use sbof_core::DFGPlus;

/// Random valid graph with `n` nodes and about `density * n` edges. When
/// `labeled`, some memory nodes with an incoming direct-flow edge are
/// vulnerable and at least one always is.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64, labeled: bool) -> DFGPlus {
    let mut kinds: Vec<NodeKind> = (0..n).map(|_| NodeKind::ALL[rng.gen_range(0..4)]).collect();
    kinds[0] = NodeKind::RNode;
    kinds[n - 1] = NodeKind::MNode;
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    let target = (density * n as f64) as usize;
    while edges.len() < target {
        let src = rng.gen_range(0..n as u32);
        let dst = rng.gen_range(0..n as u32);
        if src == dst {
            continue;
        }
        let mut rel = Relation::ALL[rng.gen_range(0..Relation::COUNT)];
        if rel == Relation::AEdge && (kinds[src as usize] != NodeKind::MNode || kinds[dst as usize] != NodeKind::MNode) {
            rel = Relation::DEdge;
        }
        let e = Edge { src, dst, rel };
        if seen.insert(e) {
            edges.push(e);
        }
    }
    let anchor = Edge { src: 0, dst: n as u32 - 1, rel: Relation::DEdge };
    if seen.insert(anchor) {
        edges.push(anchor);
    }
    let mut has_d = vec![false; n];
    for e in &edges {
        if e.rel == Relation::DEdge {
            has_d[e.dst as usize] = true;
        }
    }
    let nodes = (0..n)
        .map(|i| {
            let label = if !labeled {
                Label::Unlabeled
            } else if kinds[i] == NodeKind::MNode && has_d[i] && (i == n - 1 || rng.gen_bool(0.3)) {
                Label::Vulnerable
            } else {
                Label::Benign
            };
            Node { id: i as u32, kind: kinds[i], label }
        })
        .collect();
    DFGPlus { nodes, edges }
}

/// Uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    use rand::seq::SliceRandom;
    let mut p: Vec<u32> = (0..n as u32).collect();
    p.shuffle(rng);
    p
}

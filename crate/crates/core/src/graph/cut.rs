use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DFGPlus, Edge, Label, NodeKind, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CutError {
    #[error("graph is unlabeled")]
    Unlabeled,
    #[error("vulnerable node {0} has no incoming direct-flow edge")]
    PositiveFiltered(u32),
    #[error("empty sample set")]
    NoSamples,
    #[error("subgraph count must be at least 1")]
    NoSubgraphs,
    #[error("sample {0} is not a node of the graph")]
    UnknownSample(u32),
}

/// A piece of a cut graph. Node ids are those of the parent graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphSample {
    /// Index of the parent graph in whatever collection it came from.
    pub origin: usize,
    pub sample_ids: Vec<u32>,
    pub support_ids: Vec<u32>,
    /// Sorted union of sample and support ids.
    pub nodes: Vec<u32>,
    /// Kind and label of each entry of `nodes`.
    pub kinds: Vec<NodeKind>,
    pub labels: Vec<Label>,
    /// Edges with both endpoints inside `nodes`.
    pub edges: Vec<Edge>,
    /// Per-node degree counts in the parent graph; absent entries are zero.
    pub carried_norms: BTreeMap<(u32, Relation, Direction), u32>,
}

impl SubgraphSample {
    /// The whole graph as one subgraph whose samples are `samples`.
    pub fn whole(g: &DFGPlus, samples: &BTreeSet<u32>, origin: usize) -> Self {
        let all: BTreeSet<u32> = (0..g.len() as u32).collect();
        make_subgraph(g, samples, &all, origin)
    }

    pub fn norm(&self, node: u32, rel: Relation, dir: Direction) -> u32 {
        self.carried_norms.get(&(node, rel, dir)).copied().unwrap_or(0)
    }
}

fn eligible(g: &DFGPlus) -> Vec<bool> {
    let mut has_d = vec![false; g.len()];
    for e in &g.edges {
        if e.rel == Relation::DEdge {
            has_d[e.dst as usize] = true;
        }
    }
    g.nodes
        .iter()
        .map(|n| !matches!(n.kind, NodeKind::RNode | NodeKind::INode) && has_d[n.id as usize])
        .collect()
}

/// Positives and candidate negatives of one graph after filtering.
fn candidates(g: &DFGPlus) -> Result<(Vec<u32>, Vec<u32>), CutError> {
    if !g.is_labeled() {
        return Err(CutError::Unlabeled);
    }
    let ok = eligible(g);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for n in &g.nodes {
        match (n.label, ok[n.id as usize]) {
            (Label::Vulnerable, true) => pos.push(n.id),
            (Label::Vulnerable, false) => return Err(CutError::PositiveFiltered(n.id)),
            (_, true) => neg.push(n.id),
            _ => {}
        }
    }
    Ok((pos, neg))
}

fn pick(pool: &[u32], k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let k = k.min(pool.len());
    let mut chosen: Vec<u32> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// All vulnerable nodes plus `round(neg_ratio * positives)` randomly chosen
/// benign nodes, after dropping register and immediate nodes and nodes
/// without an incoming direct-flow edge.
pub fn select_samples(g: &DFGPlus, neg_ratio: f64, seed: u64) -> Result<BTreeSet<u32>, CutError> {
    let (pos, neg) = candidates(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = (neg_ratio * pos.len() as f64).round() as usize;
    Ok(pos.into_iter().chain(pick(&neg, k, &mut rng)).collect())
}

/// Like [`select_samples`] over a collection of graphs, drawing the negatives
/// from the pooled candidates of every graph so that graphs without any
/// vulnerable node still contribute benign samples.
pub fn select_samples_pooled(
    graphs: &[&DFGPlus],
    neg_ratio: f64,
    seed: u64,
) -> Result<Vec<BTreeSet<u32>>, CutError> {
    let mut out = Vec::with_capacity(graphs.len());
    let mut pool: Vec<(usize, u32)> = Vec::new();
    let mut positives = 0usize;
    for (gi, g) in graphs.iter().enumerate() {
        let (pos, neg) = candidates(g)?;
        positives += pos.len();
        pool.extend(neg.into_iter().map(|n| (gi, n)));
        out.push(pos.into_iter().collect::<BTreeSet<u32>>());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ((neg_ratio * positives as f64).round() as usize).min(pool.len());
    for i in sample(&mut rng, pool.len(), k) {
        let (gi, n) = pool[i];
        out[gi].insert(n);
    }
    Ok(out)
}

fn make_subgraph(g: &DFGPlus, samples: &BTreeSet<u32>, closure: &BTreeSet<u32>, origin: usize) -> SubgraphSample {
    let (din, dout) = g.degrees();
    let nodes: Vec<u32> = closure.iter().copied().collect();
    let mut carried_norms = BTreeMap::new();
    for &n in &nodes {
        for rel in Relation::ALL {
            let i = din[n as usize][rel.index()];
            let o = dout[n as usize][rel.index()];
            if i > 0 {
                carried_norms.insert((n, rel, Direction::In), i);
            }
            if o > 0 {
                carried_norms.insert((n, rel, Direction::Out), o);
            }
        }
    }
    SubgraphSample {
        origin,
        sample_ids: samples.iter().copied().collect(),
        support_ids: closure.difference(samples).copied().collect(),
        kinds: nodes.iter().map(|&n| g.nodes[n as usize].kind).collect(),
        labels: nodes.iter().map(|&n| g.nodes[n as usize].label).collect(),
        edges: g
            .edges
            .iter()
            .copied()
            .filter(|e| closure.contains(&e.src) && closure.contains(&e.dst))
            .collect(),
        nodes,
        carried_norms,
    }
}

/// Splits `samples` into at most `n_subgraphs` contiguous groups and grows
/// each by `hops` rounds of undirected neighbour expansion.
pub fn cut(
    g: &DFGPlus,
    samples: &BTreeSet<u32>,
    n_subgraphs: usize,
    hops: usize,
    origin: usize,
) -> Result<Vec<SubgraphSample>, CutError> {
    if samples.is_empty() {
        return Err(CutError::NoSamples);
    }
    if n_subgraphs == 0 {
        return Err(CutError::NoSubgraphs);
    }
    if let Some(&bad) = samples.iter().find(|&&s| s as usize >= g.len()) {
        return Err(CutError::UnknownSample(bad));
    }
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); g.len()];
    for e in &g.edges {
        adj[e.src as usize].push(e.dst);
        adj[e.dst as usize].push(e.src);
    }
    let sorted: Vec<u32> = samples.iter().copied().collect();
    let size = sorted.len().div_ceil(n_subgraphs);
    Ok(sorted
        .chunks(size)
        .map(|group| {
            let group: BTreeSet<u32> = group.iter().copied().collect();
            let mut closure = group.clone();
            let mut frontier: Vec<u32> = group.iter().copied().collect();
            for _ in 0..hops {
                let mut next = Vec::new();
                for n in frontier {
                    for &m in &adj[n as usize] {
                        if closure.insert(m) {
                            next.push(m);
                        }
                    }
                }
                frontier = next;
            }
            make_subgraph(g, &group, &closure, origin)
        })
        .collect())
}

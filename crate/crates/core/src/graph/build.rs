use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use thiserror::Error;

use super::restore::{boundary_below, map_overflow_byte, restore_adjacent, RestoreError, Toward};
use super::{DFGPlus, Edge, Label, Node, NodeKind, Relation, SupportMaps};
use crate::isa::ShadowMap;
use crate::trace::{Location, RecordKind, Role, Trace, TraceRecord, VulnMark};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("record {seq}: trace still contains instrumentation markers")]
    Marker { seq: u64 },
    #[error("mark references unknown record {seq}")]
    UnknownMark { seq: u64 },
    #[error("marked record {seq} writes no memory")]
    MarkWithoutMemDst { seq: u64 },
    #[error("marked record {seq} is a system call")]
    MarkOnInput { seq: u64 },
    #[error("record {seq}: addressing pair ({a}, {m}) does not point at a memory operand")]
    BadAddressing { seq: u64, a: usize, m: usize },
    #[error("record {seq}: {source}")]
    Restore { seq: u64, source: RestoreError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Cell {
    Reg(u16),
    Flags,
    Byte(u64),
}

struct Builder<'a> {
    shadow: &'a ShadowMap,
    kinds: Vec<NodeKind>,
    insn: Vec<u64>,
    seq: Vec<u64>,
    addr: BTreeMap<u32, (u64, u32)>,
    edges: Vec<Edge>,
    edge_set: HashSet<Edge>,
    live: HashMap<Cell, u32>,
}

impl<'a> Builder<'a> {
    fn node(&mut self, kind: NodeKind, rec: &TraceRecord) -> u32 {
        let id = self.kinds.len() as u32;
        self.kinds.push(kind);
        self.insn.push(rec.iaddr);
        self.seq.push(rec.seq);
        id
    }

    fn edge(&mut self, src: u32, dst: u32, rel: Relation) {
        let e = Edge { src, dst, rel };
        if src != dst && self.edge_set.insert(e) {
            self.edges.push(e);
        }
    }

    /// Bytes of a memory operand as they would be laid out without redzones.
    fn restored_bytes(&self, loc: &Location) -> Result<Vec<u64>, RestoreError> {
        loc.bytes()
            .map(|x| {
                if self.shadow.is_redzone(x) {
                    map_overflow_byte(x, boundary_below(x, self.shadow)?, self.shadow)
                } else {
                    Ok(x)
                }
            })
            .collect()
    }

    fn cells(&self, loc: &Location) -> Result<Vec<Cell>, RestoreError> {
        Ok(match *loc {
            Location::Reg { id, .. } => vec![Cell::Reg(id)],
            Location::Flags => vec![Cell::Flags],
            Location::Mem { .. } => self.restored_bytes(loc)?.into_iter().map(Cell::Byte).collect(),
            Location::Imm(_) => Vec::new(),
        })
    }

    /// Live nodes currently holding `cells`, in cell order without repeats.
    fn live_nodes(&self, cells: &[Cell]) -> Vec<u32> {
        let mut out = Vec::new();
        for c in cells {
            if let Some(&n) = self.live.get(c) {
                if !out.contains(&n) {
                    out.push(n);
                }
            }
        }
        out
    }

    /// Nodes read by operand `loc`; undefined storage becomes a live-in node.
    fn read(&mut self, rec: &TraceRecord, loc: &Location) -> Result<Vec<u32>, RestoreError> {
        if let Location::Imm(_) = loc {
            return Ok(vec![self.node(NodeKind::INode, rec)]);
        }
        let cells = self.cells(loc)?;
        let mut nodes = self.live_nodes(&cells);
        let undefined: Vec<Cell> = cells.iter().copied().filter(|c| !self.live.contains_key(c)).collect();
        if !undefined.is_empty() {
            let kind = if matches!(loc, Location::Mem { .. }) { NodeKind::MNode } else { NodeKind::RNode };
            let id = self.node(kind, rec);
            if let Location::Mem { .. } = loc {
                self.record_addr(id, &undefined);
            }
            for c in undefined {
                self.live.insert(c, id);
            }
            nodes.push(id);
        }
        Ok(nodes)
    }

    fn record_addr(&mut self, id: u32, cells: &[Cell]) {
        let lo = cells
            .iter()
            .filter_map(|c| match c {
                Cell::Byte(b) => Some(*b),
                _ => None,
            })
            .min();
        if let Some(lo) = lo {
            self.addr.insert(id, (lo, cells.len() as u32));
        }
    }

    /// Defines a new node over `cells`, linking it to what it covers and,
    /// for memory nodes, to its neighbours.
    fn define(&mut self, rec: &TraceRecord, kind: NodeKind, cells: &[Cell]) -> Result<u32, RestoreError> {
        let covered = self.live_nodes(cells);
        let id = self.node(kind, rec);
        for old in covered {
            self.edge(old, id, Relation::REdge);
        }
        for c in cells {
            self.live.insert(*c, id);
        }
        let bytes: Vec<u64> = cells
            .iter()
            .filter_map(|c| match c {
                Cell::Byte(b) => Some(*b),
                _ => None,
            })
            .collect();
        if !bytes.is_empty() {
            self.record_addr(id, cells);
        }
        if kind == NodeKind::MNode {
            let lo = *bytes.iter().min().expect("memory node has bytes");
            let hi = *bytes.iter().max().expect("memory node has bytes");
            if let Ok(below) = restore_adjacent(lo, Toward::Lower, self.shadow) {
                if let Some(&n) = self.live.get(&Cell::Byte(below)) {
                    if self.kinds[n as usize] == NodeKind::MNode {
                        self.edge(n, id, Relation::AEdge);
                    }
                }
            }
            if let Ok(above) = restore_adjacent(hi, Toward::Higher, self.shadow) {
                if let Some(&n) = self.live.get(&Cell::Byte(above)) {
                    if self.kinds[n as usize] == NodeKind::MNode {
                        self.edge(id, n, Relation::AEdge);
                    }
                }
            }
        }
        Ok(id)
    }

    fn record(&mut self, rec: &TraceRecord) -> Result<Vec<u32>, BuildError> {
        let wrap = |source| BuildError::Restore { seq: rec.seq, source };
        let ops = &rec.operands;
        for &(a, m) in &rec.flow.addressing {
            if !matches!(ops.get(m).map(|o| o.loc), Some(Location::Mem { .. })) || a >= ops.len() {
                return Err(BuildError::BadAddressing { seq: rec.seq, a, m });
            }
        }

        // Reads are resolved only when some flow consumes them.
        let mut wanted = BTreeSet::new();
        for &(s, _) in rec.flow.direct.iter().chain(&rec.flow.compares) {
            wanted.insert(s);
        }
        for &(a, m) in &rec.flow.addressing {
            wanted.insert(a);
            if ops[m].role.is_read() {
                wanted.insert(m);
            }
        }
        let mut reads: HashMap<usize, Vec<u32>> = HashMap::new();
        for i in wanted {
            if ops[i].role.is_read() {
                let nodes = self.read(rec, &ops[i].loc).map_err(wrap)?;
                reads.insert(i, nodes);
            }
        }

        // Each destination defines a new node; contiguous input chunks share one.
        let mut defs: HashMap<usize, u32> = HashMap::new();
        let mut mem_defs = Vec::new();
        let dsts: Vec<usize> = (0..ops.len()).filter(|&i| ops[i].role == Role::Dst).collect();
        if rec.kind == RecordKind::Syscall {
            let mut group: Vec<usize> = Vec::new();
            let mut end = None;
            let flush = |b: &mut Self, group: &mut Vec<usize>, defs: &mut HashMap<usize, u32>| -> Result<(), BuildError> {
                if group.is_empty() {
                    return Ok(());
                }
                let mut cells = Vec::new();
                for &i in group.iter() {
                    cells.extend(b.cells(&ops[i].loc).map_err(wrap)?);
                }
                let id = b.define(rec, NodeKind::ENode, &cells).map_err(wrap)?;
                for &i in group.iter() {
                    defs.insert(i, id);
                }
                group.clear();
                Ok(())
            };
            for &i in &dsts {
                let range = ops[i].loc.bytes();
                if end != Some(range.start) {
                    flush(self, &mut group, &mut defs)?;
                }
                end = Some(range.end);
                group.push(i);
            }
            flush(self, &mut group, &mut defs)?;
        } else {
            for &i in &dsts {
                let loc = ops[i].loc;
                let kind = match loc {
                    Location::Mem { .. } => NodeKind::MNode,
                    _ => NodeKind::RNode,
                };
                let cells = self.cells(&loc).map_err(wrap)?;
                let id = self.define(rec, kind, &cells).map_err(wrap)?;
                if kind == NodeKind::MNode {
                    mem_defs.push(id);
                }
                defs.insert(i, id);
            }
        }

        for &(s, d) in &rec.flow.direct {
            if let (Some(src), Some(&dst)) = (reads.get(&s), defs.get(&d)) {
                for &n in src.clone().iter() {
                    self.edge(n, dst, Relation::DEdge);
                }
            }
        }
        for &(c, f) in &rec.flow.compares {
            if let (Some(src), Some(&dst)) = (reads.get(&c), defs.get(&f)) {
                for &n in src.clone().iter() {
                    self.edge(n, dst, Relation::CEdge);
                }
            }
        }
        for &(a, m) in &rec.flow.addressing {
            let Some(ptr) = reads.get(&a).cloned() else { continue };
            let targets = match defs.get(&m) {
                Some(&d) => vec![d],
                None => reads.get(&m).cloned().unwrap_or_default(),
            };
            for p in ptr {
                for &t in &targets {
                    self.edge(p, t, Relation::IEdge);
                }
            }
        }
        Ok(mem_defs)
    }
}

/// Builds the DFG+ of a marker-free trace.
///
/// `shadow` is the redzone map of an instrumented run (empty for plain runs);
/// memory bytes are translated through it so the graph matches the one an
/// uninstrumented run would produce. `marks` names the records performing an
/// invalid access; the memory nodes they define are labelled vulnerable and
/// every other node benign. Without marks all nodes are unlabelled.
pub fn build_graph(
    trace: &Trace,
    marks: Option<&[VulnMark]>,
    shadow: &ShadowMap,
) -> Result<(DFGPlus, SupportMaps), BuildError> {
    let mut b = Builder {
        shadow,
        kinds: Vec::new(),
        insn: Vec::new(),
        seq: Vec::new(),
        addr: BTreeMap::new(),
        edges: Vec::new(),
        edge_set: HashSet::new(),
        live: HashMap::new(),
    };
    let marked: BTreeSet<u64> = marks.unwrap_or(&[]).iter().map(|m| m.seq).collect();
    let mut found = BTreeSet::new();
    let mut vulnerable = BTreeSet::new();
    for rec in &trace.records {
        if rec.is_marker() {
            return Err(BuildError::Marker { seq: rec.seq });
        }
        if rec.kind == RecordKind::Fault {
            continue;
        }
        let mem_defs = b.record(rec)?;
        if marked.contains(&rec.seq) {
            found.insert(rec.seq);
            if rec.kind == RecordKind::Syscall {
                return Err(BuildError::MarkOnInput { seq: rec.seq });
            }
            if mem_defs.is_empty() {
                return Err(BuildError::MarkWithoutMemDst { seq: rec.seq });
            }
            vulnerable.extend(mem_defs);
        }
    }
    if let Some(seq) = marked.difference(&found).next() {
        return Err(BuildError::UnknownMark { seq: *seq });
    }
    let nodes = b
        .kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| Node {
            id: i as u32,
            kind,
            label: match marks {
                None => Label::Unlabeled,
                Some(_) if vulnerable.contains(&(i as u32)) => Label::Vulnerable,
                Some(_) => Label::Benign,
            },
        })
        .collect();
    let graph = DFGPlus { nodes, edges: b.edges };
    let maps = SupportMaps {
        node_to_insn: b.insn,
        node_to_seq: b.seq,
        node_to_addr: b.addr.into_iter().map(|(id, (a, s))| (id, a, s)).collect(),
    };
    Ok((graph, maps))
}

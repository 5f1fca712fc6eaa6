use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{DFGPlus, Label, NodeKind, SupportMaps};
use crate::model::NodePrediction;

/// One reported overflow point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    /// Instruction address of the invalid access.
    pub overflow_point: u64,
    /// Address written by the most confident node.
    pub corrupted_addr: u64,
    pub node_ids: Vec<u32>,
    pub confidence: f64,
}

/// Groups predicted-vulnerable memory nodes by defining instruction.
pub fn localize(g: &DFGPlus, maps: &SupportMaps, preds: &BTreeMap<u32, NodePrediction>) -> Vec<Finding> {
    let mut groups: BTreeMap<u64, Vec<(u32, f64)>> = BTreeMap::new();
    for (&id, p) in preds {
        let Some(node) = g.nodes.get(id as usize) else { continue };
        if p.label == Label::Vulnerable && node.kind == NodeKind::MNode {
            groups.entry(maps.node_to_insn[id as usize]).or_default().push((id, p.prob));
        }
    }
    groups
        .into_iter()
        .map(|(insn, nodes)| {
            let &(best, confidence) = nodes
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("groups are non-empty");
            Finding {
                overflow_point: insn,
                corrupted_addr: maps.addr(best).map(|(a, _)| a).unwrap_or(0),
                node_ids: nodes.iter().map(|n| n.0).collect(),
                confidence,
            }
        })
        .collect()
}

/// Outcome of matching findings against the labelled vulnerable nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Distinct vulnerable instructions.
    pub vulnerabilities: usize,
    /// Vulnerabilities with at least one of their nodes predicted vulnerable.
    pub detected: usize,
    /// Detected vulnerabilities whose finding names a byte of the corrupted variable.
    pub addr_correct: usize,
    /// Findings at instructions with no vulnerable node.
    pub false_findings: usize,
}

impl Detection {
    pub fn rate(&self) -> f64 {
        if self.vulnerabilities == 0 {
            1.0
        } else {
            self.detected as f64 / self.vulnerabilities as f64
        }
    }

    pub fn merge(&mut self, other: &Detection) {
        self.vulnerabilities += other.vulnerabilities;
        self.detected += other.detected;
        self.addr_correct += other.addr_correct;
        self.false_findings += other.false_findings;
    }
}

/// Scores findings of one graph. A vulnerability is the set of vulnerable
/// nodes sharing an instruction; `corrupted` tells whether an address lies in
/// the variable that instruction corrupted.
pub fn score_findings(
    g: &DFGPlus,
    maps: &SupportMaps,
    findings: &[Finding],
    corrupted: impl Fn(u64, u64) -> bool,
) -> Detection {
    let mut vuln: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for n in g.nodes.iter().filter(|n| n.label == Label::Vulnerable) {
        vuln.entry(maps.node_to_insn[n.id as usize]).or_default().insert(n.id);
    }
    let mut d = Detection { vulnerabilities: vuln.len(), ..Default::default() };
    for f in findings {
        match vuln.get(&f.overflow_point) {
            Some(nodes) if f.node_ids.iter().any(|id| nodes.contains(id)) => {
                d.detected += 1;
                if corrupted(f.overflow_point, f.corrupted_addr) {
                    d.addr_correct += 1;
                }
            }
            Some(_) => {}
            None => d.false_findings += 1,
        }
    }
    d
}

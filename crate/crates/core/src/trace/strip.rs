use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Location, MarkerKind, RecordKind, Trace, TraceError, TraceRecord};

/// A record flagged by a `vuln_next` marker as performing an invalid access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VulnMark {
    pub seq: u64,
}

/// Storage cell used for dependency matching: registers by id, memory by byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Cell {
    Reg(u16),
    Flags,
    Byte(u64),
}

fn cells(loc: &Location, out: &mut Vec<Cell>) {
    match *loc {
        Location::Reg { id, .. } => out.push(Cell::Reg(id)),
        Location::Flags => out.push(Cell::Flags),
        Location::Mem { .. } => out.extend(loc.bytes().map(Cell::Byte)),
        Location::Imm(_) => {}
    }
}

fn reads(record: &TraceRecord) -> HashSet<Cell> {
    let mut v = Vec::new();
    for op in record.operands.iter().filter(|op| op.role.is_read()) {
        cells(&op.loc, &mut v);
    }
    v.into_iter().collect()
}

fn writes(record: &TraceRecord) -> HashSet<Cell> {
    let mut v = Vec::new();
    for op in record.operands.iter().filter(|op| !op.role.is_read()) {
        cells(&op.loc, &mut v);
    }
    v.into_iter().collect()
}

/// Removes instrumentation segments and converts `vuln_next` markers to marks.
///
/// Records between a `BeginInstr`/`EndInstr` pair are dropped unless they are
/// floated program instructions: a record inside a segment is kept when some
/// record outside every segment, later in the trace, reads a location it wrote
/// before that location is written again. Returned records keep their
/// original `seq`.
pub fn strip_instrumentation(trace: &Trace) -> Result<(Trace, Vec<VulnMark>), TraceError> {
    let records = &trace.records;
    let n = records.len();
    let mut in_segment = vec![false; n];
    let mut open: Option<u64> = None;
    for (i, r) in records.iter().enumerate() {
        match r.kind {
            RecordKind::Marker(MarkerKind::BeginInstr) => {
                if open.is_some() {
                    return Err(TraceError::Nested { seq: r.seq });
                }
                open = Some(r.seq);
            }
            RecordKind::Marker(MarkerKind::EndInstr) => {
                if open.take().is_none() {
                    return Err(TraceError::Unbalanced { seq: r.seq });
                }
            }
            _ => in_segment[i] = open.is_some(),
        }
    }
    if let Some(seq) = open {
        return Err(TraceError::Unbalanced { seq });
    }
    if !in_segment.iter().any(|&s| s) && !trace.has_markers() {
        return Ok((trace.clone(), Vec::new()));
    }

    let read_sets: Vec<HashSet<Cell>> = records.iter().map(reads).collect();
    let write_sets: Vec<HashSet<Cell>> = records.iter().map(writes).collect();

    let mut keep = vec![false; n];
    for i in 0..n {
        if records[i].is_marker() {
            continue;
        }
        if !in_segment[i] {
            keep[i] = true;
            continue;
        }
        let mut pending: HashSet<Cell> = write_sets[i].clone();
        let mut j = i + 1;
        while j < n && !pending.is_empty() {
            if !records[j].is_marker() {
                if !in_segment[j] && pending.iter().any(|c| read_sets[j].contains(c)) {
                    keep[i] = true;
                    break;
                }
                pending.retain(|c| !write_sets[j].contains(c));
            }
            j += 1;
        }
    }

    let mut marks = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.kind != RecordKind::Marker(MarkerKind::VulnNext) {
            continue;
        }
        let target = records[i + 1..]
            .iter()
            .enumerate()
            .find(|(_, t)| !t.is_marker())
            .map(|(k, t)| (i + 1 + k, t.seq));
        match target {
            None => return Err(TraceError::VulnNextLast { seq: r.seq }),
            Some((idx, _)) if !keep[idx] => return Err(TraceError::MarkOnRemoved { seq: r.seq }),
            Some((_, seq)) => marks.push(VulnMark { seq }),
        }
    }
    marks.dedup();

    let kept = records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Ok((Trace::new(kept), marks))
}

//! Execution-trace records and the instrumentation-stripping pass.
//!
//! A trace is an ordered stream of [`TraceRecord`]s, one per executed
//! instruction, system call, instrumentation marker or fault. Records carry
//! the operands they touched and a [`FlowSpec`] describing how information
//! moves between those operands; the graph builder consumes nothing else.

mod jsonl;
mod strip;

pub use jsonl::{parse_trace, serialize_trace, write_trace, TraceReader};
pub use strip::{strip_instrumentation, VulnMark};

use thiserror::Error;

/// Marker records emitted by the instrumented interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarkerKind {
    /// Start of an inserted bookkeeping segment.
    BeginInstr,
    /// End of an inserted bookkeeping segment.
    EndInstr,
    /// The next program record performs an invalid memory access.
    VulnNext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Insn,
    Syscall,
    Marker(MarkerKind),
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Src,
    Dst,
    Addr,
    CmpSrc,
}

impl Role {
    /// Whether the operand's location is read by the record.
    pub fn is_read(self) -> bool {
        !matches!(self, Role::Dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Mem { addr: u64, size: u8 },
    Reg { id: u16, size: u8 },
    Imm(i64),
    Flags,
}

impl Location {
    /// Byte addresses covered by a memory location.
    pub fn bytes(&self) -> std::ops::Range<u64> {
        match *self {
            Location::Mem { addr, size } => addr..addr + u64::from(size),
            _ => 0..0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Operand {
    pub role: Role,
    pub loc: Location,
}

impl Operand {
    pub fn new(role: Role, loc: Location) -> Self {
        Self { role, loc }
    }
}

/// Operand-index pairs describing the information flow of one record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct FlowSpec {
    /// `src -> dst` direct value flow.
    pub direct: Vec<(usize, usize)>,
    /// `addr -> mem`: the address operand selects the memory operand.
    pub addressing: Vec<(usize, usize)>,
    /// `cmp-src -> flags`.
    pub compares: Vec<(usize, usize)>,
}

impl FlowSpec {
    pub fn is_empty(&self) -> bool {
        self.direct.is_empty() && self.addressing.is_empty() && self.compares.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub seq: u64,
    pub iaddr: u64,
    pub kind: RecordKind,
    pub operands: Vec<Operand>,
    pub flow: FlowSpec,
}

impl TraceRecord {
    pub fn marker(seq: u64, iaddr: u64, kind: MarkerKind) -> Self {
        Self {
            seq,
            iaddr,
            kind: RecordKind::Marker(kind),
            operands: Vec::new(),
            flow: FlowSpec::default(),
        }
    }

    pub fn is_marker(&self) -> bool {
        matches!(self.kind, RecordKind::Marker(_))
    }

    /// Checks the per-record invariants: marker records are empty, flow
    /// indices are in bounds and point at operands of the right role, and
    /// memory sizes are 1, 2 or 4 bytes.
    pub fn validate(&self) -> Result<(), String> {
        if self.is_marker() && (!self.operands.is_empty() || !self.flow.is_empty()) {
            return Err("marker record carries operands".into());
        }
        for op in &self.operands {
            match op.loc {
                Location::Mem { size, .. } if !matches!(size, 1 | 2 | 4) => {
                    return Err(format!("memory operand of size {size}"));
                }
                Location::Imm(_) if op.role == Role::Addr => {
                    return Err("address operand is an immediate".into());
                }
                Location::Imm(_) if op.role == Role::Dst => {
                    return Err("destination operand is an immediate".into());
                }
                _ => {}
            }
        }
        let n = self.operands.len();
        let check = |pairs: &[(usize, usize)], what: &str| -> Result<(), String> {
            for &(a, b) in pairs {
                if a >= n || b >= n {
                    return Err(format!("{what} pair ({a},{b}) out of bounds for {n} operands"));
                }
            }
            Ok(())
        };
        check(&self.flow.direct, "direct")?;
        check(&self.flow.addressing, "addr")?;
        check(&self.flow.compares, "cmp")?;
        for &(s, d) in &self.flow.direct {
            if !self.operands[s].role.is_read() || self.operands[d].role != Role::Dst {
                return Err(format!("direct pair ({s},{d}) is not read -> dst"));
            }
        }
        for &(a, m) in &self.flow.addressing {
            if self.operands[a].role != Role::Addr
                || !matches!(self.operands[m].loc, Location::Mem { .. })
            {
                return Err(format!("addr pair ({a},{m}) is not addr -> mem"));
            }
        }
        for &(c, f) in &self.flow.compares {
            if self.operands[c].role != Role::CmpSrc
                || self.operands[f].role != Role::Dst
                || self.operands[f].loc != Location::Flags
            {
                return Err(format!("cmp pair ({c},{f}) is not cmp-src -> flags"));
            }
        }
        if self.kind == RecordKind::Insn {
            for (i, op) in self.operands.iter().enumerate() {
                if op.role == Role::Dst
                    && !self.flow.direct.iter().any(|&(_, d)| d == i)
                    && !self.flow.compares.iter().any(|&(_, f)| f == i)
                {
                    return Err(format!("destination operand {i} has no incoming flow"));
                }
            }
        }
        Ok(())
    }
}

/// An ordered execution trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_markers(&self) -> bool {
        self.records.iter().any(TraceRecord::is_marker)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed JSON at line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("seq regression at line {line}: {seq} after {prev}")]
    SeqRegression { line: usize, prev: u64, seq: u64 },
    #[error("invalid record at line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("unbalanced instrumentation markers at seq {seq}")]
    Unbalanced { seq: u64 },
    #[error("nested instrumentation segment at seq {seq}")]
    Nested { seq: u64 },
    #[error("vuln_next marker at seq {seq} is not followed by a program record")]
    VulnNextLast { seq: u64 },
    #[error("vuln_next marker at seq {seq} points into a removed segment")]
    MarkOnRemoved { seq: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

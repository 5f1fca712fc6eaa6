use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{
    FlowSpec, Location, MarkerKind, Operand, RecordKind, Role, Trace, TraceError, TraceRecord,
};

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Insn,
    Syscall,
    Marker,
    Fault,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawMarker {
    Begin,
    End,
    VulnNext,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawRole {
    Src,
    Dst,
    Addr,
    Cmp,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
enum RawLoc {
    Mem { a: u64, sz: u8 },
    Reg { r: u16, sz: u8 },
    Imm { v: i64 },
    Flags,
}

#[derive(Serialize, Deserialize)]
struct RawOperand {
    role: RawRole,
    loc: RawLoc,
}

#[derive(Serialize, Deserialize, Default)]
struct RawFlow {
    #[serde(default)]
    direct: Vec<(usize, usize)>,
    #[serde(default)]
    addr: Vec<(usize, usize)>,
    #[serde(default)]
    cmp: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    seq: u64,
    iaddr: u64,
    kind: RawKind,
    #[serde(default)]
    marker: Option<RawMarker>,
    #[serde(default)]
    ops: Vec<RawOperand>,
    #[serde(default)]
    flow: RawFlow,
}

impl From<&TraceRecord> for RawRecord {
    fn from(r: &TraceRecord) -> Self {
        let (kind, marker) = match r.kind {
            RecordKind::Insn => (RawKind::Insn, None),
            RecordKind::Syscall => (RawKind::Syscall, None),
            RecordKind::Fault => (RawKind::Fault, None),
            RecordKind::Marker(m) => (
                RawKind::Marker,
                Some(match m {
                    MarkerKind::BeginInstr => RawMarker::Begin,
                    MarkerKind::EndInstr => RawMarker::End,
                    MarkerKind::VulnNext => RawMarker::VulnNext,
                }),
            ),
        };
        let ops = r
            .operands
            .iter()
            .map(|op| RawOperand {
                role: match op.role {
                    Role::Src => RawRole::Src,
                    Role::Dst => RawRole::Dst,
                    Role::Addr => RawRole::Addr,
                    Role::CmpSrc => RawRole::Cmp,
                },
                loc: match op.loc {
                    Location::Mem { addr, size } => RawLoc::Mem { a: addr, sz: size },
                    Location::Reg { id, size } => RawLoc::Reg { r: id, sz: size },
                    Location::Imm(v) => RawLoc::Imm { v },
                    Location::Flags => RawLoc::Flags,
                },
            })
            .collect();
        RawRecord {
            seq: r.seq,
            iaddr: r.iaddr,
            kind,
            marker,
            ops,
            flow: RawFlow {
                direct: r.flow.direct.clone(),
                addr: r.flow.addressing.clone(),
                cmp: r.flow.compares.clone(),
            },
        }
    }
}

impl TryFrom<RawRecord> for TraceRecord {
    type Error = String;

    fn try_from(raw: RawRecord) -> Result<Self, String> {
        let kind = match (raw.kind, raw.marker) {
            (RawKind::Insn, None) => RecordKind::Insn,
            (RawKind::Syscall, None) => RecordKind::Syscall,
            (RawKind::Fault, None) => RecordKind::Fault,
            (RawKind::Marker, Some(m)) => RecordKind::Marker(match m {
                RawMarker::Begin => MarkerKind::BeginInstr,
                RawMarker::End => MarkerKind::EndInstr,
                RawMarker::VulnNext => MarkerKind::VulnNext,
            }),
            (RawKind::Marker, None) => return Err("marker record without marker kind".into()),
            (_, Some(_)) => return Err("marker kind on a non-marker record".into()),
        };
        let operands = raw
            .ops
            .into_iter()
            .map(|op| Operand {
                role: match op.role {
                    RawRole::Src => Role::Src,
                    RawRole::Dst => Role::Dst,
                    RawRole::Addr => Role::Addr,
                    RawRole::Cmp => Role::CmpSrc,
                },
                loc: match op.loc {
                    RawLoc::Mem { a, sz } => Location::Mem { addr: a, size: sz },
                    RawLoc::Reg { r, sz } => Location::Reg { id: r, size: sz },
                    RawLoc::Imm { v } => Location::Imm(v),
                    RawLoc::Flags => Location::Flags,
                },
            })
            .collect();
        let record = TraceRecord {
            seq: raw.seq,
            iaddr: raw.iaddr,
            kind,
            operands,
            flow: FlowSpec {
                direct: raw.flow.direct,
                addressing: raw.flow.addr,
                compares: raw.flow.cmp,
            },
        };
        record.validate()?;
        Ok(record)
    }
}

/// Streaming JSON Lines reader; holds at most one record in memory.
pub struct TraceReader<R> {
    input: R,
    line: usize,
    prev_seq: Option<u64>,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: 0,
            prev_seq: None,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let line = self.line;
            let raw: RawRecord = match serde_json::from_str(text) {
                Ok(raw) => raw,
                Err(source) => return Some(Err(TraceError::Json { line, source })),
            };
            let record = match TraceRecord::try_from(raw) {
                Ok(r) => r,
                Err(reason) => return Some(Err(TraceError::Invalid { line, reason })),
            };
            if let Some(prev) = self.prev_seq {
                if record.seq <= prev {
                    return Some(Err(TraceError::SeqRegression {
                        line,
                        prev,
                        seq: record.seq,
                    }));
                }
            }
            self.prev_seq = Some(record.seq);
            return Some(Ok(record));
        }
    }
}

/// Parses a JSON Lines trace, validating record invariants and seq order.
pub fn parse_trace<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    TraceReader::new(input)
        .collect::<Result<Vec<_>, _>>()
        .map(Trace::new)
}

/// Writes one JSON object per record, newline terminated.
pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> std::io::Result<()> {
    for record in &trace.records {
        serde_json::to_writer(&mut out, &RawRecord::from(record))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize_trace(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mov_imm(seq: u64) -> TraceRecord {
        TraceRecord {
            seq,
            iaddr: 0,
            kind: RecordKind::Insn,
            operands: vec![
                Operand::new(Role::Src, Location::Imm(5)),
                Operand::new(Role::Dst, Location::Reg { id: 0, size: 4 }),
            ],
            flow: FlowSpec {
                direct: vec![(0, 1)],
                ..Default::default()
            },
        }
    }

    #[test]
    fn empty_stream_is_empty_trace() {
        let t = parse_trace("".as_bytes()).unwrap();
        assert!(t.is_empty());
        assert_eq!(serialize_trace(&Trace::default()), "");
    }

    #[test]
    fn single_record_is_one_line() {
        let text = serialize_trace(&Trace::new(vec![mov_imm(0)]));
        assert_eq!(text.lines().count(), 1);
        assert_eq!(
            text,
            "{\"seq\":0,\"iaddr\":0,\"kind\":\"insn\",\"marker\":null,\"ops\":[{\"role\":\"src\",\"loc\":{\"t\":\"imm\",\"v\":5}},{\"role\":\"dst\",\"loc\":{\"t\":\"reg\",\"r\":0,\"sz\":4}}],\"flow\":{\"direct\":[[0,1]],\"addr\":[],\"cmp\":[]}}\n"
        );
    }

    #[test]
    fn seq_regression_reports_line() {
        let text = serialize_trace(&Trace::new(vec![mov_imm(9)]))
            + &serialize_trace(&Trace::new(vec![mov_imm(5)]));
        let err = parse_trace(text.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "seq regression at line 2: 5 after 9");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = serialize_trace(&Trace::new(vec![mov_imm(0)])) + "{not json\n";
        match parse_trace(text.as_bytes()) {
            Err(TraceError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn operand_index_out_of_bounds_rejected() {
        let line = r#"{"seq":0,"iaddr":0,"kind":"insn","marker":null,"ops":[{"role":"dst","loc":{"t":"reg","r":0,"sz":4}}],"flow":{"direct":[[3,0]],"addr":[],"cmp":[]}}"#;
        assert!(matches!(
            parse_trace(line.as_bytes()),
            Err(TraceError::Invalid { line: 1, .. })
        ));
    }

    #[test]
    fn marker_with_operands_rejected() {
        let line = r#"{"seq":0,"iaddr":0,"kind":"marker","marker":"begin","ops":[{"role":"src","loc":{"t":"flags"}}],"flow":{"direct":[],"addr":[],"cmp":[]}}"#;
        assert!(matches!(
            parse_trace(line.as_bytes()),
            Err(TraceError::Invalid { .. })
        ));
    }

    #[test]
    fn bad_memory_size_rejected() {
        let line = r#"{"seq":0,"iaddr":0,"kind":"syscall","marker":null,"ops":[{"role":"dst","loc":{"t":"mem","a":16,"sz":3}}],"flow":{}}"#;
        assert!(matches!(
            parse_trace(line.as_bytes()),
            Err(TraceError::Invalid { .. })
        ));
    }
}

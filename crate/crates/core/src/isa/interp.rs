//! The micro-ISA interpreter.
//!
//! In [`Mode::Instrumented`] variables are relocated behind redzones and every
//! memory access is preceded by an inserted check segment
//! (`BeginInstr … EndInstr`). An access that lands on a poisoned byte is
//! reported with a `VulnNext` marker and an [`OverflowPoint`], and execution
//! carries on. Program values live at their uninstrumented addresses, so the
//! relocation never changes what a program computes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::layout::{mapped, shadow_addr, Layout};
use super::{MemRef, MicroInsn, Operand, Program, Reg, ShadowMap, CHECK_REG, SP, WORD};
use crate::trace::{
    FlowSpec, Location, MarkerKind, Operand as TraceOperand, RecordKind, Role, Trace, TraceRecord,
};

/// Instruction addresses at or above this value belong to inserted code.
pub const INSERTED_IADDR: u64 = 0x8000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    Instrumented,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_input: usize,
    pub step_limit: u64,
    /// Poisoned bytes on each side of every variable in instrumented runs.
    pub redzone: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_input: 1 << 16,
            step_limit: 1_000_000,
            redzone: 16,
        }
    }
}

/// An out-of-bounds access. Addresses refer to the uninstrumented layout in
/// both modes so that points from the two modes compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowPoint {
    /// Index of the offending instruction.
    pub insn: usize,
    /// Dynamic instruction count at which it executed.
    pub step: u64,
    pub write: bool,
    /// Out-of-bounds bytes touched by the access.
    pub bytes: Vec<u32>,
    /// Variable that owns the first out-of-bounds byte, if any.
    pub corrupted_var: Option<String>,
    /// First out-of-bounds byte.
    pub corrupted_addr: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub insn: usize,
    pub addr: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    /// Redzones of this run; empty in plain mode.
    pub shadow: ShadowMap,
    pub overflows: Vec<OverflowPoint>,
    /// Set when the run stopped on an access outside the address space.
    pub fault: Option<Fault>,
    /// Placement used for the trace addresses.
    pub layout: Layout,
    pub registers: [i32; 17],
    pub steps: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("step limit of {limit} exceeded")]
    StepLimit { limit: u64 },
    #[error("input of {len} bytes exceeds the maximum of {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("instruction {insn} jumps to {target}, outside the program")]
    BadJump { insn: usize, target: usize },
    #[error("variables do not fit in the address space")]
    LayoutTooLarge,
}

struct Access {
    logical: i64,
    actual: i64,
    len: u32,
    var: usize,
    offset: i64,
}

struct PendingRecord {
    iaddr: u64,
    kind: RecordKind,
    operands: Vec<TraceOperand>,
    flow: FlowSpec,
}

struct Machine<'a> {
    program: &'a Program,
    mode: Mode,
    flat: Layout,
    actual: Layout,
    regs: [i32; 17],
    cmp: (i32, i32),
    mem: HashMap<u32, u8>,
    input: &'a [u8],
    cursor: usize,
    records: Vec<TraceRecord>,
    overflows: Vec<OverflowPoint>,
    deferred: Option<PendingRecord>,
}

fn reg_loc(r: Reg) -> Location {
    Location::Reg { id: r.id(), size: WORD as u8 }
}

fn op(role: Role, loc: Location) -> TraceOperand {
    TraceOperand::new(role, loc)
}

impl<'a> Machine<'a> {
    fn emit(&mut self, rec: PendingRecord) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            seq,
            iaddr: rec.iaddr,
            kind: rec.kind,
            operands: rec.operands,
            flow: rec.flow,
        });
    }

    fn marker(&mut self, iaddr: u64, kind: MarkerKind) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord::marker(seq, iaddr, kind));
    }

    fn resolve(&self, m: &MemRef, len: u32) -> Result<Access, u64> {
        let idx = m
            .index
            .map(|(r, scale)| i64::from(self.regs[r.0 as usize]) * i64::from(scale))
            .unwrap_or(0);
        let offset = i64::from(m.disp) + idx;
        let logical = i64::from(self.flat.addrs[m.var]) + offset;
        let actual = i64::from(self.actual.addrs[m.var]) + offset;
        let ok = |a: i64| a >= 0 && mapped(a as u64) && mapped((a + i64::from(len) - 1) as u64);
        if !ok(actual) {
            return Err(actual.max(0) as u64);
        }
        if !ok(logical) {
            return Err(logical.max(0) as u64);
        }
        Ok(Access { logical, actual, len, var: m.var, offset })
    }

    fn read_word(&self, addr: i64) -> i32 {
        let a = addr as u32;
        let bytes = [0, 1, 2, 3].map(|k| self.mem.get(&(a + k)).copied().unwrap_or(0));
        i32::from_le_bytes(bytes)
    }

    fn write_bytes(&mut self, addr: i64, bytes: &[u8]) {
        for (k, b) in bytes.iter().enumerate() {
            self.mem.insert(addr as u32 + k as u32, *b);
        }
    }

    fn mem_loc(&self, a: &Access) -> Location {
        Location::Mem { addr: a.actual as u64, size: a.len as u8 }
    }

    fn value(&self, o: &Operand, access: Option<&Access>) -> i32 {
        match o {
            Operand::Reg(r) => self.regs[r.0 as usize],
            Operand::Imm(v) => *v,
            Operand::Mem(_) => self.read_word(access.expect("memory operand resolved").logical),
        }
    }

    fn loc(&self, o: &Operand, access: Option<&Access>) -> Location {
        match o {
            Operand::Reg(r) => reg_loc(*r),
            Operand::Imm(v) => Location::Imm(i64::from(*v)),
            Operand::Mem(_) => self.mem_loc(access.expect("memory operand resolved")),
        }
    }

    /// Bytes of `a` outside their variable, as uninstrumented addresses.
    fn out_of_bounds(&self, a: &Access) -> Vec<u32> {
        match self.mode {
            Mode::Plain => {
                let size = i64::from(self.flat.sizes[a.var]);
                (0..i64::from(a.len))
                    .filter(|k| {
                        let off = a.offset + k;
                        off < 0 || off >= size
                    })
                    .map(|k| (a.logical + k) as u32)
                    .collect()
            }
            Mode::Instrumented => (0..i64::from(a.len))
                .filter(|k| self.actual.shadow.is_redzone((a.actual + k) as u64))
                .map(|k| (a.logical + k) as u32)
                .collect(),
        }
    }

    fn check_segment(&mut self, pc: usize, a: &Access) {
        let iaddr = INSERTED_IADDR | pc as u64;
        self.marker(iaddr, MarkerKind::BeginInstr);
        let mut chunk = 0;
        while chunk < a.len {
            let shadow = shadow_addr((a.actual + i64::from(chunk)) as u32);
            self.emit(PendingRecord {
                iaddr,
                kind: RecordKind::Insn,
                operands: vec![
                    op(Role::Src, Location::Mem { addr: u64::from(shadow), size: 1 }),
                    op(Role::Dst, Location::Reg { id: CHECK_REG, size: 1 }),
                ],
                flow: FlowSpec { direct: vec![(0, 1)], ..Default::default() },
            });
            if let Some(floated) = self.deferred.take() {
                self.emit(floated);
            }
            self.emit(PendingRecord {
                iaddr,
                kind: RecordKind::Insn,
                operands: vec![
                    op(Role::CmpSrc, Location::Reg { id: CHECK_REG, size: 1 }),
                    op(Role::CmpSrc, Location::Imm(0)),
                    op(Role::Dst, Location::Flags),
                ],
                flow: FlowSpec { compares: vec![(0, 2), (1, 2)], ..Default::default() },
            });
            chunk += WORD;
        }
        self.marker(iaddr, MarkerKind::EndInstr);
    }

    fn poison_segment(&mut self) {
        let iaddr = INSERTED_IADDR | 0x7fff_ffff;
        let zones: Vec<_> = self.actual.shadow.zones().copied().collect();
        if zones.is_empty() {
            return;
        }
        self.marker(iaddr, MarkerKind::BeginInstr);
        for z in zones {
            let mut a = z.lo;
            while a < z.hi {
                self.emit(PendingRecord {
                    iaddr,
                    kind: RecordKind::Insn,
                    operands: vec![
                        op(Role::Src, Location::Imm(0xf1)),
                        op(Role::Dst, Location::Mem { addr: u64::from(shadow_addr(a as u32)), size: 1 }),
                    ],
                    flow: FlowSpec { direct: vec![(0, 1)], ..Default::default() },
                });
                a += 8;
            }
        }
        self.marker(iaddr, MarkerKind::EndInstr);
    }

    /// Index-register operand for `m`, appended to `ops`; returns its position.
    fn push_index(&self, m: &MemRef, ops: &mut Vec<TraceOperand>) -> Option<usize> {
        m.index.map(|(r, _)| {
            ops.push(op(Role::Addr, reg_loc(r)));
            ops.len() - 1
        })
    }

    fn step(&mut self, pc: usize, step: u64) -> Result<Option<usize>, Fault> {
        let insn = &self.program.instructions[pc];
        let refs = insn.mem_refs();
        let len = match insn {
            MicroInsn::Input { len, .. } => *len,
            _ => WORD,
        };
        let access = match refs.first() {
            Some(m) => Some(self.resolve(m, len).map_err(|addr| Fault { insn: pc, addr })?),
            None => None,
        };

        if let Some(a) = &access {
            if self.mode == Mode::Instrumented {
                self.check_segment(pc, a);
            }
            let bytes = self.out_of_bounds(a);
            if !bytes.is_empty() {
                if self.mode == Mode::Instrumented {
                    self.marker(INSERTED_IADDR | pc as u64, MarkerKind::VulnNext);
                }
                let first = bytes[0];
                let write = matches!(
                    insn,
                    MicroInsn::Store { .. } | MicroInsn::Input { .. }
                ) || matches!(insn, MicroInsn::Add { dst: Operand::Mem(_), .. } | MicroInsn::Sub { dst: Operand::Mem(_), .. });
                self.overflows.push(OverflowPoint {
                    insn: pc,
                    step,
                    write,
                    corrupted_var: self
                        .flat
                        .owner(u64::from(first))
                        .map(|v| self.program.data_layout[v].name.clone()),
                    corrupted_addr: first,
                    bytes,
                });
            }
        } else if let Some(floated) = self.deferred.take() {
            self.emit(floated);
        }

        let a = access.as_ref();
        let iaddr = pc as u64;
        let mut next = Some(pc + 1);
        let mut ops = Vec::new();
        let mut flow = FlowSpec::default();
        let mut kind = RecordKind::Insn;
        match insn {
            MicroInsn::Mov { dst, src } => {
                self.regs[dst.0 as usize] = self.value(src, a);
                ops.push(op(Role::Src, self.loc(src, a)));
                ops.push(op(Role::Dst, reg_loc(*dst)));
                flow.direct.push((0, 1));
            }
            MicroInsn::Add { dst, src } | MicroInsn::Sub { dst, src } => {
                let lhs = self.value(dst, a);
                let rhs = self.value(src, a);
                let result = if matches!(insn, MicroInsn::Add { .. }) {
                    lhs.wrapping_add(rhs)
                } else {
                    lhs.wrapping_sub(rhs)
                };
                ops.push(op(Role::Src, self.loc(dst, a)));
                ops.push(op(Role::Src, self.loc(src, a)));
                let index = dst.mem().or(src.mem()).and_then(|m| self.push_index(m, &mut ops));
                ops.push(op(Role::Dst, self.loc(dst, a)));
                let d = ops.len() - 1;
                flow.direct.extend([(0, d), (1, d)]);
                if let Some(i) = index {
                    if dst.mem().is_some() {
                        flow.addressing.extend([(i, 0), (i, d)]);
                    } else {
                        flow.addressing.push((i, 1));
                    }
                }
                match dst {
                    Operand::Reg(r) => self.regs[r.0 as usize] = result,
                    Operand::Mem(_) => {
                        self.write_bytes(a.expect("resolved").logical, &result.to_le_bytes())
                    }
                    Operand::Imm(_) => unreachable!("rejected by the assembler"),
                }
            }
            MicroInsn::Cmp { lhs, rhs } => {
                self.cmp = (self.value(lhs, a), self.value(rhs, a));
                ops.push(op(Role::CmpSrc, self.loc(lhs, a)));
                ops.push(op(Role::CmpSrc, self.loc(rhs, a)));
                let mem_pos = if lhs.mem().is_some() { 0 } else { 1 };
                let index = lhs.mem().or(rhs.mem()).and_then(|m| self.push_index(m, &mut ops));
                ops.push(op(Role::Dst, Location::Flags));
                let f = ops.len() - 1;
                flow.compares.extend([(0, f), (1, f)]);
                if let Some(i) = index {
                    flow.addressing.push((i, mem_pos));
                }
            }
            MicroInsn::Jmp { target } => next = Some(*target),
            MicroInsn::Jcc { cond, target } => {
                ops.push(op(Role::Src, Location::Flags));
                if cond.holds(self.cmp.0, self.cmp.1) {
                    next = Some(*target);
                }
            }
            MicroInsn::Load { dst, src } => {
                let acc = a.expect("resolved");
                self.regs[dst.0 as usize] = self.read_word(acc.logical);
                ops.push(op(Role::Src, self.mem_loc(acc)));
                let index = self.push_index(src, &mut ops);
                ops.push(op(Role::Dst, reg_loc(*dst)));
                let d = ops.len() - 1;
                flow.direct.push((0, d));
                if let Some(i) = index {
                    flow.addressing.push((i, 0));
                }
            }
            MicroInsn::Store { dst, src } => {
                let acc = a.expect("resolved");
                let v = self.value(src, a);
                self.write_bytes(acc.logical, &v.to_le_bytes());
                ops.push(op(Role::Src, self.loc(src, a)));
                let index = self.push_index(dst, &mut ops);
                ops.push(op(Role::Dst, self.mem_loc(acc)));
                let d = ops.len() - 1;
                flow.direct.push((0, d));
                if let Some(i) = index {
                    flow.addressing.push((i, d));
                }
            }
            MicroInsn::Input { dst, len } => {
                kind = RecordKind::Syscall;
                let acc = a.expect("resolved");
                let bytes: Vec<u8> = (0..*len as usize)
                    .map(|k| self.input.get(self.cursor + k).copied().unwrap_or(0xff))
                    .collect();
                self.cursor += *len as usize;
                self.write_bytes(acc.logical, &bytes);
                let index = self.push_index(dst, &mut ops);
                let mut off = 0u32;
                while off < *len {
                    let size = match *len - off {
                        n if n >= 4 => 4,
                        n if n >= 2 => 2,
                        _ => 1,
                    };
                    ops.push(op(
                        Role::Dst,
                        Location::Mem { addr: (acc.actual + i64::from(off)) as u64, size: size as u8 },
                    ));
                    if let Some(i) = index {
                        flow.addressing.push((i, ops.len() - 1));
                    }
                    off += size;
                }
            }
            MicroInsn::Halt => next = None,
        }
        let rec = PendingRecord { iaddr, kind, operands: ops, flow };
        let defer = self.mode == Mode::Instrumented
            && self.program.floated.contains(&pc)
            && self
                .program
                .instructions
                .get(pc + 1)
                .is_some_and(MicroInsn::touches_memory);
        if defer {
            self.deferred = Some(rec);
        } else {
            self.emit(rec);
        }
        Ok(next)
    }
}

/// Executes `program` on `input`.
pub fn run(program: &Program, input: &[u8], mode: Mode, cfg: &RunConfig) -> Result<RunOutput, SimError> {
    if input.len() > cfg.max_input {
        return Err(SimError::InputTooLong { len: input.len(), max: cfg.max_input });
    }
    let n = program.instructions.len();
    for (insn, i) in program.instructions.iter().enumerate() {
        if let Some(target) = i.jump_target().filter(|&t| t > n) {
            return Err(SimError::BadJump { insn, target });
        }
    }
    let flat = Layout::flat(program);
    let actual = match mode {
        Mode::Plain => flat.clone(),
        Mode::Instrumented => Layout::with_redzones(program, cfg.redzone),
    };
    if !flat.fits() || !actual.fits() {
        return Err(SimError::LayoutTooLarge);
    }
    let mut regs = [0i32; 17];
    regs[SP.0 as usize] = super::layout::STACK_TOP as i32;
    let mut m = Machine {
        program,
        mode,
        flat,
        actual,
        regs,
        cmp: (0, 0),
        mem: HashMap::new(),
        input,
        cursor: 0,
        records: Vec::new(),
        overflows: Vec::new(),
        deferred: None,
    };
    if mode == Mode::Instrumented {
        m.poison_segment();
    }
    let mut pc = program.entry;
    let mut steps = 0u64;
    let mut fault = None;
    while pc < n {
        if steps >= cfg.step_limit {
            return Err(SimError::StepLimit { limit: cfg.step_limit });
        }
        match m.step(pc, steps) {
            Ok(Some(next)) => pc = next,
            Ok(None) => {
                steps += 1;
                break;
            }
            Err(f) => {
                let seq = m.records.len() as u64;
                m.records.push(TraceRecord {
                    seq,
                    iaddr: pc as u64,
                    kind: RecordKind::Fault,
                    operands: Vec::new(),
                    flow: FlowSpec::default(),
                });
                fault = Some(f);
                break;
            }
        }
        steps += 1;
    }
    if let Some(floated) = m.deferred.take() {
        m.emit(floated);
    }
    Ok(RunOutput {
        trace: Trace::new(m.records),
        shadow: m.actual.shadow.clone(),
        overflows: m.overflows,
        fault,
        layout: m.actual,
        registers: m.regs,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::samples::{int_input, AGES_LOOP, AGES_LOOP_STORE};
    use crate::isa::assemble;

    fn ages() -> Program {
        assemble(AGES_LOOP).unwrap()
    }

    #[test]
    fn off_by_one_reports_single_point() {
        let p = ages();
        let input = int_input(&(1..=33).collect::<Vec<_>>());
        let out = run(&p, &input, Mode::Instrumented, &RunConfig::default()).unwrap();
        assert!(out.fault.is_none());
        assert_eq!(out.overflows.len(), 1);
        let pt = &out.overflows[0];
        assert_eq!(pt.insn, AGES_LOOP_STORE);
        assert!(pt.write);
        assert_eq!(pt.corrupted_var.as_deref(), Some("total"));
        let flat = Layout::flat(&p);
        assert_eq!(pt.corrupted_addr, flat.addrs[p.var_index("total").unwrap()]);
        // The access itself is preceded by the marker.
        let marker = out
            .trace
            .records
            .iter()
            .position(|r| r.kind == RecordKind::Marker(MarkerKind::VulnNext))
            .unwrap();
        assert_eq!(out.trace.records[marker + 1].iaddr, AGES_LOOP_STORE as u64);
    }

    #[test]
    fn plain_bounds_oracle_agrees() {
        let p = ages();
        let input = int_input(&(1..=33).collect::<Vec<_>>());
        let plain = run(&p, &input, Mode::Plain, &RunConfig::default()).unwrap();
        let inst = run(&p, &input, Mode::Instrumented, &RunConfig::default()).unwrap();
        assert_eq!(plain.overflows, inst.overflows);
        assert!(!plain.trace.has_markers());
        assert_eq!(plain.registers, inst.registers);
    }

    #[test]
    fn in_bounds_run_has_no_points() {
        let p = ages();
        let input = int_input(&[5, 6, 7, 8, 9, -1]);
        for mode in [Mode::Plain, Mode::Instrumented] {
            let out = run(&p, &input, mode, &RunConfig::default()).unwrap();
            assert!(out.overflows.is_empty());
            assert!(out.fault.is_none());
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let p = ages();
        let input = int_input(&(1..=33).collect::<Vec<_>>());
        let a = run(&p, &input, Mode::Instrumented, &RunConfig::default()).unwrap();
        let b = run(&p, &input, Mode::Instrumented, &RunConfig::default()).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn non_terminating_program_hits_step_limit() {
        let p = assemble("top: jmp top\n").unwrap();
        let cfg = RunConfig { step_limit: 100, ..Default::default() };
        assert_eq!(
            run(&p, &[], Mode::Plain, &cfg).unwrap_err(),
            SimError::StepLimit { limit: 100 }
        );
    }

    #[test]
    fn wild_access_faults_and_truncates() {
        let p = assemble(".var a global 4\nmov r1, 0x1000000\nstore [a + r1*4], 1\nhalt\n").unwrap();
        let out = run(&p, &[], Mode::Plain, &RunConfig::default()).unwrap();
        assert_eq!(out.fault.map(|f| f.insn), Some(1));
        assert_eq!(out.trace.records.last().unwrap().kind, RecordKind::Fault);
        assert_eq!(out.trace.len(), 2);
    }

    #[test]
    fn input_limit_enforced() {
        let p = ages();
        let cfg = RunConfig { max_input: 8, ..Default::default() };
        assert_eq!(
            run(&p, &[0; 9], Mode::Plain, &cfg).unwrap_err(),
            SimError::InputTooLong { len: 9, max: 8 }
        );
    }

    #[test]
    fn floated_instruction_lands_inside_check_segment() {
        let p = assemble(".var a stack 4\nmov r1, 2\n.float\nadd r1, 3\nstore [a], r1\nhalt\n").unwrap();
        let out = run(&p, &[], Mode::Instrumented, &RunConfig::default()).unwrap();
        let recs = &out.trace.records;
        let add = recs.iter().position(|r| r.iaddr == 1).unwrap();
        let begin = recs[..add]
            .iter()
            .rposition(|r| r.kind == RecordKind::Marker(MarkerKind::BeginInstr))
            .unwrap();
        let end = recs[add..]
            .iter()
            .position(|r| r.kind == RecordKind::Marker(MarkerKind::EndInstr))
            .unwrap()
            + add;
        assert!(begin < add && add < end);
        assert_eq!(recs[end + 1].iaddr, 2);
        assert_eq!(out.registers[1], 5);
    }

    #[test]
    fn every_record_is_valid() {
        let p = ages();
        let input = int_input(&(1..=33).collect::<Vec<_>>());
        let out = run(&p, &input, Mode::Instrumented, &RunConfig::default()).unwrap();
        for r in &out.trace.records {
            r.validate().unwrap();
        }
    }
}

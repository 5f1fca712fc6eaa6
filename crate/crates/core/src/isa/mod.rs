//! A small register/memory ISA, its interpreter and a synthetic corpus.
//!
//! Programs address variables symbolically (`[buf + r1*4]`), so the same
//! program can run under the flat layout or under a layout with redzones
//! between variables, the way a sanitizer-instrumented build would.

mod asm;
mod corpus;
mod interp;
mod layout;
pub mod samples;

pub use asm::{assemble, disassemble, AsmError};
pub use corpus::{gen_corpus, CorpusConfig, CorpusEntry, CorpusError, RegionMix, Template};
pub use interp::{run, Fault, Mode, OverflowPoint, RunConfig, RunOutput, SimError};
pub use layout::{ByteClass, Layout, RedZone, ShadowMap, Window, WINDOWS};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number of general purpose registers (`r0`..`r15`).
pub const GP_REGS: u8 = 16;
/// Register id of the stack pointer.
pub const SP: Reg = Reg(16);
/// Register used by inserted bounds-check code; never visible to programs.
pub const CHECK_REG: u16 = 32;
/// Width in bytes of every load, store and arithmetic memory operand.
pub const WORD: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Global,
    Stack,
    Heap,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Global, Region::Stack, Region::Heap];

    pub fn name(self) -> &'static str {
        match self {
            Region::Global => "global",
            Region::Stack => "stack",
            Region::Heap => "heap",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Region::Global),
            "stack" => Ok(Region::Stack),
            "heap" => Ok(Region::Heap),
            other => Err(format!("unknown region `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDecl {
    pub name: String,
    pub region: Region,
    /// Byte offset of the variable inside its region in the flat layout.
    pub offset: u32,
    pub size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u8);

impl Reg {
    pub fn id(self) -> u16 {
        u16::from(self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == SP {
            f.write_str("sp")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

/// `[var + index*scale + disp]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRef {
    pub var: usize,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
    Mem(MemRef),
}

impl Operand {
    pub fn mem(&self) -> Option<&MemRef> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cond {
    pub const ALL: [Cond; 6] = [Cond::Eq, Cond::Ne, Cond::Lt, Cond::Le, Cond::Gt, Cond::Ge];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "je",
            Cond::Ne => "jne",
            Cond::Lt => "jl",
            Cond::Le => "jle",
            Cond::Gt => "jg",
            Cond::Ge => "jge",
        }
    }

    pub fn holds(self, lhs: i32, rhs: i32) -> bool {
        match self {
            Cond::Eq => lhs == rhs,
            Cond::Ne => lhs != rhs,
            Cond::Lt => lhs < rhs,
            Cond::Le => lhs <= rhs,
            Cond::Gt => lhs > rhs,
            Cond::Ge => lhs >= rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Mov,
    Add,
    Sub,
    Cmp,
    Jmp,
    Jcc,
    Load,
    Store,
    Input,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MicroInsn {
    /// `mov rd, reg|imm`
    Mov { dst: Reg, src: Operand },
    /// `add reg|mem, reg|imm|mem` (at most one memory operand)
    Add { dst: Operand, src: Operand },
    Sub { dst: Operand, src: Operand },
    /// `cmp reg|mem, reg|imm|mem`
    Cmp { lhs: Operand, rhs: Operand },
    Jmp { target: usize },
    Jcc { cond: Cond, target: usize },
    Load { dst: Reg, src: MemRef },
    Store { dst: MemRef, src: Operand },
    /// System call copying `len` bytes of external input to memory.
    Input { dst: MemRef, len: u32 },
    Halt,
}

impl MicroInsn {
    pub fn opcode(&self) -> Opcode {
        match self {
            MicroInsn::Mov { .. } => Opcode::Mov,
            MicroInsn::Add { .. } => Opcode::Add,
            MicroInsn::Sub { .. } => Opcode::Sub,
            MicroInsn::Cmp { .. } => Opcode::Cmp,
            MicroInsn::Jmp { .. } => Opcode::Jmp,
            MicroInsn::Jcc { .. } => Opcode::Jcc,
            MicroInsn::Load { .. } => Opcode::Load,
            MicroInsn::Store { .. } => Opcode::Store,
            MicroInsn::Input { .. } => Opcode::Input,
            MicroInsn::Halt => Opcode::Halt,
        }
    }

    /// Memory references touched by the instruction, in operand order.
    pub fn mem_refs(&self) -> Vec<MemRef> {
        match self {
            MicroInsn::Add { dst, src } | MicroInsn::Sub { dst, src } => {
                [dst, src].into_iter().filter_map(|o| o.mem().copied()).collect()
            }
            MicroInsn::Cmp { lhs, rhs } => {
                [lhs, rhs].into_iter().filter_map(|o| o.mem().copied()).collect()
            }
            MicroInsn::Load { src, .. } => vec![*src],
            MicroInsn::Store { dst, .. } | MicroInsn::Input { dst, .. } => vec![*dst],
            _ => Vec::new(),
        }
    }

    pub fn touches_memory(&self) -> bool {
        !self.mem_refs().is_empty()
    }

    pub fn jump_target(&self) -> Option<usize> {
        match self {
            MicroInsn::Jmp { target } | MicroInsn::Jcc { target, .. } => Some(*target),
            _ => None,
        }
    }
}

/// An assembled program: instructions, declared variables and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<MicroInsn>,
    pub data_layout: Vec<VarDecl>,
    pub entry: usize,
    /// Label name -> instruction index (`instructions.len()` marks the exit).
    pub labels: BTreeMap<String, usize>,
    /// Register-only instructions that an instrumenting build reorders into
    /// the check segment of the following memory access.
    pub floated: BTreeSet<usize>,
}

impl Program {
    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.data_layout.iter().position(|v| v.name == name)
    }

    pub fn var(&self, name: &str) -> Option<&VarDecl> {
        self.data_layout.iter().find(|v| v.name == name)
    }
}

impl Serialize for Program {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&disassemble(self))
    }
}

impl<'de> Deserialize<'de> for Program {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        assemble(&text).map_err(serde::de::Error::custom)
    }
}

//! Micro-assembly.
//!
//! ```text
//! .var name global|stack|heap size   ; declare a variable
//! .entry label                       ; optional, defaults to the first instruction
//! .float                             ; next instruction is reordered when instrumented
//! label: opcode operand, operand
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use super::{
    Cond, MemRef, MicroInsn, Operand, Program, Reg, Region, VarDecl, GP_REGS, SP,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: duplicate variable `{name}`")]
    DuplicateVar { line: usize, name: String },
    #[error("line {line}: undefined variable `{name}`")]
    UndefinedVar { line: usize, name: String },
    #[error("no instructions")]
    NoInstructions,
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

fn parse_int(text: &str) -> Option<i64> {
    let t = text.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.trim_start()),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

fn parse_imm(text: &str) -> Option<i32> {
    let v = parse_int(text)?;
    if (i64::from(i32::MIN)..=i64::from(u32::MAX)).contains(&v) {
        // 0xffffffff spells -1, as in `cmpl $0xffffffff`.
        Some(v as u32 as i32)
    } else {
        None
    }
}

fn parse_reg(text: &str) -> Option<Reg> {
    if text == "sp" {
        return Some(SP);
    }
    let n: u8 = text.strip_prefix('r')?.parse().ok()?;
    (n < GP_REGS).then_some(Reg(n))
}

fn is_ident(text: &str) -> bool {
    let mut chars = text.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

struct Ctx<'a> {
    vars: &'a HashMap<String, usize>,
    line: usize,
}

impl Ctx<'_> {
    fn mem(&self, inner: &str) -> Result<MemRef, AsmError> {
        // Split on +/- while keeping the sign with each term.
        let mut terms: Vec<(bool, String)> = Vec::new();
        let mut current = String::new();
        let mut neg = false;
        for c in inner.chars() {
            if c == '+' || c == '-' {
                if !current.trim().is_empty() {
                    terms.push((neg, current.trim().to_string()));
                    current.clear();
                }
                neg = c == '-';
            } else {
                current.push(c);
            }
        }
        if !current.trim().is_empty() {
            terms.push((neg, current.trim().to_string()));
        }
        let mut it = terms.into_iter();
        let (neg0, base) = it
            .next()
            .ok_or_else(|| syntax(self.line, "empty memory reference"))?;
        if neg0 || !is_ident(&base) || parse_reg(&base).is_some() {
            return Err(syntax(self.line, format!("memory base must be a variable, got `{base}`")));
        }
        let var = *self.vars.get(&base).ok_or_else(|| AsmError::UndefinedVar {
            line: self.line,
            name: base.clone(),
        })?;
        let mut index = None;
        let mut disp: i64 = 0;
        for (neg, term) in it {
            if let Some(v) = parse_int(&term) {
                disp += if neg { -v } else { v };
                continue;
            }
            let (reg_text, scale) = match term.split_once('*') {
                Some((r, s)) => {
                    let s: u8 = s
                        .trim()
                        .parse()
                        .map_err(|_| syntax(self.line, format!("bad scale in `{term}`")))?;
                    (r.trim(), s)
                }
                None => (term.as_str(), 1),
            };
            let reg = parse_reg(reg_text)
                .ok_or_else(|| syntax(self.line, format!("bad memory term `{term}`")))?;
            if neg || index.is_some() || !matches!(scale, 1 | 2 | 4 | 8) {
                return Err(syntax(self.line, format!("bad index term `{term}`")));
            }
            index = Some((reg, scale));
        }
        let disp = i32::try_from(disp)
            .map_err(|_| syntax(self.line, "displacement out of range"))?;
        Ok(MemRef { var, index, disp })
    }

    fn operand(&self, text: &str) -> Result<Operand, AsmError> {
        let t = text.trim();
        if let Some(inner) = t.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| syntax(self.line, format!("unterminated memory operand `{t}`")))?;
            return self.mem(inner).map(Operand::Mem);
        }
        if let Some(r) = parse_reg(t) {
            return Ok(Operand::Reg(r));
        }
        parse_imm(t)
            .map(Operand::Imm)
            .ok_or_else(|| syntax(self.line, format!("bad operand `{t}`")))
    }
}

enum Pending {
    Ready(MicroInsn),
    Jump { cond: Option<Cond>, label: String, line: usize },
}

fn parse_insn(ctx: &Ctx<'_>, text: &str) -> Result<Pending, AsmError> {
    let line = ctx.line;
    let (op, rest) = match text.split_once(char::is_whitespace) {
        Some((op, rest)) => (op, rest.trim()),
        None => (text, ""),
    };
    let args: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let arity = |n: usize| -> Result<(), AsmError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(syntax(line, format!("`{op}` takes {n} operand(s), got {}", args.len())))
        }
    };
    let reg_or_imm = |o: Operand| -> Result<Operand, AsmError> {
        match o {
            Operand::Mem(_) => Err(syntax(line, format!("`{op}` source must be a register or immediate"))),
            o => Ok(o),
        }
    };
    let reg = |o: Operand| -> Result<Reg, AsmError> {
        match o {
            Operand::Reg(r) => Ok(r),
            _ => Err(syntax(line, format!("`{op}` expects a register"))),
        }
    };
    let mem = |o: Operand| -> Result<MemRef, AsmError> {
        match o {
            Operand::Mem(m) => Ok(m),
            _ => Err(syntax(line, format!("`{op}` expects a memory operand"))),
        }
    };
    let two_place = |dst: Operand, src: Operand| -> Result<(Operand, Operand), AsmError> {
        if matches!(dst, Operand::Imm(_)) {
            return Err(syntax(line, format!("`{op}` destination is an immediate")));
        }
        if dst.mem().is_some() && src.mem().is_some() {
            return Err(syntax(line, format!("`{op}` has two memory operands")));
        }
        Ok((dst, src))
    };

    if let Some(cond) = Cond::ALL.iter().find(|c| c.mnemonic() == op) {
        arity(1)?;
        return Ok(Pending::Jump { cond: Some(*cond), label: args[0].to_string(), line });
    }
    let insn = match op {
        "jmp" => {
            arity(1)?;
            return Ok(Pending::Jump { cond: None, label: args[0].to_string(), line });
        }
        "halt" => {
            arity(0)?;
            MicroInsn::Halt
        }
        "mov" => {
            arity(2)?;
            MicroInsn::Mov {
                dst: reg(ctx.operand(args[0])?)?,
                src: reg_or_imm(ctx.operand(args[1])?)?,
            }
        }
        "add" | "sub" => {
            arity(2)?;
            let (dst, src) = two_place(ctx.operand(args[0])?, ctx.operand(args[1])?)?;
            if op == "add" {
                MicroInsn::Add { dst, src }
            } else {
                MicroInsn::Sub { dst, src }
            }
        }
        "cmp" => {
            arity(2)?;
            let (lhs, rhs) = two_place(ctx.operand(args[0])?, ctx.operand(args[1])?)?;
            MicroInsn::Cmp { lhs, rhs }
        }
        "load" => {
            arity(2)?;
            MicroInsn::Load {
                dst: reg(ctx.operand(args[0])?)?,
                src: mem(ctx.operand(args[1])?)?,
            }
        }
        "store" => {
            arity(2)?;
            MicroInsn::Store {
                dst: mem(ctx.operand(args[0])?)?,
                src: reg_or_imm(ctx.operand(args[1])?)?,
            }
        }
        "input" => {
            arity(2)?;
            let len = parse_int(args[1])
                .filter(|&v| v > 0 && v <= i64::from(u16::MAX))
                .ok_or_else(|| syntax(line, "input length must be a positive integer"))?;
            MicroInsn::Input {
                dst: mem(ctx.operand(args[0])?)?,
                len: len as u32,
            }
        }
        other => return Err(syntax(line, format!("unknown opcode `{other}`"))),
    };
    Ok(Pending::Ready(insn))
}

/// Assembles micro-assembly source into a [`Program`].
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut vars: Vec<VarDecl> = Vec::new();
    let mut var_index: HashMap<String, usize> = HashMap::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut floated = BTreeSet::new();
    let mut float_next: Option<usize> = None;
    let mut entry: Option<(String, usize)> = None;
    let mut region_fill: HashMap<Region, u32> = HashMap::new();

    // Variables may be used before their `.var` line, so collect them first.
    for (no, raw) in source.lines().enumerate() {
        let line = no + 1;
        let text = raw.split(';').next().unwrap_or("").trim();
        let Some(rest) = text.strip_prefix(".var") else { continue };
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(syntax(line, "expected `.var name region size`"));
        }
        let name = parts[0];
        if !is_ident(name) || parse_reg(name).is_some() {
            return Err(syntax(line, format!("bad variable name `{name}`")));
        }
        let region: Region = parts[1].parse().map_err(|e: String| syntax(line, e))?;
        let size = parse_int(parts[2])
            .filter(|&s| s > 0 && s <= 1 << 16)
            .ok_or_else(|| syntax(line, "variable size must be positive"))? as u32;
        if var_index.contains_key(name) {
            return Err(AsmError::DuplicateVar { line, name: name.to_string() });
        }
        let fill = region_fill.entry(region).or_insert(0);
        var_index.insert(name.to_string(), vars.len());
        vars.push(VarDecl {
            name: name.to_string(),
            region,
            offset: *fill,
            size,
        });
        *fill += size;
    }

    for (no, raw) in source.lines().enumerate() {
        let line = no + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() || text.starts_with(".var") {
            continue;
        }
        if let Some(rest) = text.strip_prefix(".entry") {
            let label = rest.trim();
            if !is_ident(label) {
                return Err(syntax(line, "expected `.entry label`"));
            }
            entry = Some((label.to_string(), line));
            continue;
        }
        if text == ".float" {
            float_next = Some(line);
            continue;
        }
        if text.starts_with('.') {
            return Err(syntax(line, format!("unknown directive `{text}`")));
        }
        if let Some((label, rest)) = text.split_once(':') {
            let label = label.trim();
            if !is_ident(label) {
                return Err(syntax(line, format!("bad label `{label}`")));
            }
            if labels.insert(label.to_string(), pending.len()).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: label.to_string() });
            }
            text = rest.trim();
            if text.is_empty() {
                continue;
            }
        }
        let ctx = Ctx { vars: &var_index, line };
        let insn = parse_insn(&ctx, text)?;
        if float_next.take().is_some() {
            floated.insert(pending.len());
        }
        pending.push(insn);
    }

    if pending.is_empty() {
        return Err(AsmError::NoInstructions);
    }
    if let Some(line) = float_next {
        return Err(syntax(line, "`.float` is not followed by an instruction"));
    }

    let mut instructions = Vec::with_capacity(pending.len());
    for p in pending {
        instructions.push(match p {
            Pending::Ready(i) => i,
            Pending::Jump { cond, label, line } => {
                let target = *labels
                    .get(&label)
                    .ok_or(AsmError::UndefinedLabel { line, label: label.clone() })?;
                match cond {
                    Some(cond) => MicroInsn::Jcc { cond, target },
                    None => MicroInsn::Jmp { target },
                }
            }
        });
    }
    for &idx in &floated {
        let register_only = matches!(
            instructions[idx],
            MicroInsn::Mov { .. } | MicroInsn::Add { .. } | MicroInsn::Sub { .. }
        ) && !instructions[idx].touches_memory();
        if !register_only {
            return Err(syntax(0, format!("instruction {idx} marked `.float` is not register-only")));
        }
    }
    let entry = match entry {
        None => 0,
        Some((label, line)) => *labels
            .get(&label)
            .filter(|&&i| i < instructions.len())
            .ok_or(AsmError::UndefinedLabel { line, label })?,
    };

    Ok(Program {
        instructions,
        data_layout: vars,
        entry,
        labels,
        floated,
    })
}

fn fmt_imm(v: i32) -> String {
    if v >= 10 {
        format!("{v:#x}")
    } else {
        v.to_string()
    }
}

fn fmt_mem(p: &Program, m: &MemRef) -> String {
    let mut s = format!("[{}", p.data_layout[m.var].name);
    if let Some((r, scale)) = m.index {
        if scale == 1 {
            let _ = write!(s, " + {r}");
        } else {
            let _ = write!(s, " + {r}*{scale}");
        }
    }
    match m.disp {
        0 => {}
        d if d > 0 => {
            let _ = write!(s, " + {}", fmt_imm(d));
        }
        d => {
            let _ = write!(s, " - {}", fmt_imm(-d));
        }
    }
    s.push(']');
    s
}

fn fmt_operand(p: &Program, o: &Operand) -> String {
    match o {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => fmt_imm(*v),
        Operand::Mem(m) => fmt_mem(p, m),
    }
}

/// Renders a program back to canonical micro-assembly.
pub fn disassemble(p: &Program) -> String {
    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &idx) in &p.labels {
        by_index.entry(idx).or_default().push(name);
    }
    let target_name = |t: usize| -> String {
        by_index
            .get(&t)
            .and_then(|names| names.first())
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("L{t}"))
    };
    let mut out = String::new();
    for v in &p.data_layout {
        let _ = writeln!(out, ".var {} {} {}", v.name, v.region.name(), v.size);
    }
    if p.entry != 0 {
        let _ = writeln!(out, ".entry {}", target_name(p.entry));
    }
    let emit_labels = |out: &mut String, idx: usize| {
        if let Some(names) = by_index.get(&idx) {
            for n in names {
                let _ = writeln!(out, "{n}:");
            }
        } else if p.instructions.iter().any(|i| i.jump_target() == Some(idx))
            || (p.entry == idx && idx != 0)
        {
            let _ = writeln!(out, "L{idx}:");
        }
    };
    for (idx, insn) in p.instructions.iter().enumerate() {
        emit_labels(&mut out, idx);
        if p.floated.contains(&idx) {
            out.push_str("    .float\n");
        }
        let body = match insn {
            MicroInsn::Mov { dst, src } => format!("mov {dst}, {}", fmt_operand(p, src)),
            MicroInsn::Add { dst, src } => {
                format!("add {}, {}", fmt_operand(p, dst), fmt_operand(p, src))
            }
            MicroInsn::Sub { dst, src } => {
                format!("sub {}, {}", fmt_operand(p, dst), fmt_operand(p, src))
            }
            MicroInsn::Cmp { lhs, rhs } => {
                format!("cmp {}, {}", fmt_operand(p, lhs), fmt_operand(p, rhs))
            }
            MicroInsn::Jmp { target } => format!("jmp {}", target_name(*target)),
            MicroInsn::Jcc { cond, target } => {
                format!("{} {}", cond.mnemonic(), target_name(*target))
            }
            MicroInsn::Load { dst, src } => format!("load {dst}, {}", fmt_mem(p, src)),
            MicroInsn::Store { dst, src } => {
                format!("store {}, {}", fmt_mem(p, dst), fmt_operand(p, src))
            }
            MicroInsn::Input { dst, len } => format!("input {}, {len}", fmt_mem(p, dst)),
            MicroInsn::Halt => "halt".to_string(),
        };
        let _ = writeln!(out, "    {body}");
    }
    emit_labels(&mut out, p.instructions.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::samples::AGES_LOOP;

    #[test]
    fn ages_loop_has_fourteen_instructions() {
        let p = assemble(AGES_LOOP).unwrap();
        assert_eq!(p.instructions.len(), 14);
        let sizes: Vec<(&str, u32)> = p
            .data_layout
            .iter()
            .map(|v| (v.name.as_str(), v.size))
            .collect();
        for (name, size) in [("age", 4), ("i", 4), ("total", 4), ("ages", 128)] {
            assert!(sizes.contains(&(name, size)), "{name}");
        }
    }

    #[test]
    fn minimal_program() {
        let p = assemble("mov r0, 5\nhalt").unwrap();
        assert_eq!(
            p.instructions,
            vec![MicroInsn::Mov { dst: Reg(0), src: Operand::Imm(5) }, MicroInsn::Halt]
        );
    }

    #[test]
    fn empty_source_rejected() {
        assert_eq!(assemble(""), Err(AsmError::NoInstructions));
        assert_eq!(assemble("; only a comment\n.var x stack 4\n"), Err(AsmError::NoInstructions));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(
            assemble("mov r0, 1\nfrob r1\n"),
            Err(AsmError::Syntax { line: 2, .. })
        ));
        assert_eq!(
            assemble("jmp nowhere\n"),
            Err(AsmError::UndefinedLabel { line: 1, label: "nowhere".into() })
        );
        assert_eq!(
            assemble(".var a stack 4\n.var a global 4\nhalt\n"),
            Err(AsmError::DuplicateVar { line: 2, name: "a".into() })
        );
        assert!(matches!(
            assemble("store [nope], 1\n"),
            Err(AsmError::UndefinedVar { line: 1, .. })
        ));
        assert!(matches!(
            assemble(".var a stack 4\nadd [a], [a]\n"),
            Err(AsmError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn memory_operand_forms() {
        let p = assemble(
            ".var buf global 64\nload r1, [buf]\nload r1, [buf + r2*4]\nload r1, [buf + r2*4 - 4]\nstore [buf + 8], -1\n",
        )
        .unwrap();
        assert_eq!(
            p.instructions[2],
            MicroInsn::Load {
                dst: Reg(1),
                src: MemRef { var: 0, index: Some((Reg(2), 4)), disp: -4 }
            }
        );
        assert_eq!(
            p.instructions[3],
            MicroInsn::Store {
                dst: MemRef { var: 0, index: None, disp: 8 },
                src: Operand::Imm(-1)
            }
        );
    }

    #[test]
    fn hex_all_ones_is_minus_one() {
        let p = assemble(".var a stack 4\ncmp [a], 0xffffffff\n").unwrap();
        assert!(matches!(p.instructions[0], MicroInsn::Cmp { rhs: Operand::Imm(-1), .. }));
    }

    #[test]
    fn flat_offsets_follow_declaration_order() {
        let p = assemble(".var a stack 8\n.var g global 4\n.var b stack 4\nhalt\n").unwrap();
        assert_eq!(p.var("a").unwrap().offset, 0);
        assert_eq!(p.var("b").unwrap().offset, 8);
        assert_eq!(p.var("g").unwrap().offset, 0);
    }

    #[test]
    fn float_requires_register_instruction() {
        assert!(assemble(".var a stack 4\n.float\nstore [a], 1\n").is_err());
        let p = assemble(".var a stack 4\n.float\nadd r1, 2\nstore [a], r1\n").unwrap();
        assert!(p.floated.contains(&0));
    }

    #[test]
    fn disassembly_round_trips() {
        let p = assemble(AGES_LOOP).unwrap();
        let text = disassemble(&p);
        let q = assemble(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(disassemble(&q), text);
    }
}

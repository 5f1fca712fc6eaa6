//! Synthetic programs with known overflow points.
//!
//! Every entry declares a buffer with a live variable directly above it. A
//! vulnerable entry writes 1..k elements past the end of the buffer, silently
//! corrupting that variable; a benign entry either stays in bounds on a short
//! input or runs a correctly bounded version of the same loop. Ground truth
//! comes from the plain-mode bounds check of the interpreter.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::interp::{run, Mode, OverflowPoint, RunConfig};
use super::samples::int_input;
use super::{assemble, Program, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// Read integers until a sentinel with an inclusive loop bound.
    ReadLoop,
    /// Copy a length-prefixed number of elements from a source array.
    CopyLen,
    /// Fill an input-controlled number of slots with a constant.
    FillConst,
    /// Store running sums of input values.
    PrefixSum,
    /// Copy input words up to a zero terminator.
    WordCopy,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::ReadLoop,
        Template::CopyLen,
        Template::FillConst,
        Template::PrefixSum,
        Template::WordCopy,
    ];
}

/// Relative weights of the region holding the vulnerable buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMix {
    pub stack: f64,
    pub global: f64,
    pub heap: f64,
}

impl Default for RegionMix {
    fn default() -> Self {
        Self { stack: 1.0, global: 1.0, heap: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub count: usize,
    pub frac_vuln: f64,
    pub regions: RegionMix,
    /// Inclusive range of buffer lengths in elements.
    pub buf_elems: (u32, u32),
    /// Inclusive range of elements written past the end.
    pub overflow_elems: (u32, u32),
    pub templates: Vec<Template>,
    /// Upper bound on unrelated code blocks mixed into each program.
    pub max_distractors: u32,
    /// Fraction of entries whose epilogue carries a floated instruction.
    pub frac_floated: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 200,
            frac_vuln: 0.5,
            regions: RegionMix::default(),
            buf_elems: (4, 12),
            overflow_elems: (1, 3),
            templates: Template::ALL.to_vec(),
            max_distractors: 2,
            frac_floated: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: usize,
    /// Entries sharing a program id come from the same source program.
    pub program_id: usize,
    pub template: Template,
    pub region: Region,
    pub program: Program,
    pub input: Vec<u8>,
    pub ground_truth: Vec<OverflowPoint>,
    pub is_vulnerable: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("infeasible corpus config: {0}")]
    Infeasible(String),
    #[error("entry {id}: {reason}")]
    Generation { id: usize, reason: String },
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Infeasible(m.to_string()));
        if !(0.0..=1.0).contains(&self.frac_vuln) {
            return bad("frac_vuln must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.frac_floated) {
            return bad("frac_floated must lie in [0, 1]");
        }
        if self.buf_elems.0 < 2 || self.buf_elems.0 > self.buf_elems.1 || self.buf_elems.1 > 256 {
            return bad("buf_elems must be an ordered range within 2..=256");
        }
        if self.overflow_elems.0 < 1 || self.overflow_elems.0 > self.overflow_elems.1 {
            return bad("overflow_elems must be an ordered range starting at 1 or more");
        }
        if self.overflow_elems.1 > 4 {
            return bad("overflow_elems above 4 can skip a 16-byte redzone");
        }
        if self.templates.is_empty() {
            return bad("no templates");
        }
        let w = [self.regions.stack, self.regions.global, self.regions.heap];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad("region weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

/// Splits `total` over `weights` by largest remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

struct Spec {
    template: Template,
    region: Region,
    n: u32,
    extra: u32,
    vulnerable: bool,
    floated: bool,
}

struct Builder {
    vars: String,
    code: String,
    input: Vec<i32>,
    label: usize,
}

impl Builder {
    fn var(&mut self, name: &str, region: Region, size: u32) {
        let _ = writeln!(self.vars, ".var {name} {} {size}", region.name());
    }

    fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.code, "    {}", text.as_ref());
    }

    fn label(&mut self, stem: &str) -> String {
        self.label += 1;
        format!("{stem}{}", self.label)
    }

    fn place(&mut self, label: &str) {
        let _ = writeln!(self.code, "{label}:");
    }
}

fn value(rng: &mut ChaCha8Rng) -> i32 {
    rng.gen_range(1..1000)
}

/// Buffer loop of `spec`, writing `written` elements (or the correct bound
/// when benign and `correct`).
fn emit_template(b: &mut Builder, spec: &Spec, rng: &mut ChaCha8Rng) {
    let n = spec.n as i32;
    let k = spec.extra as i32;
    // Benign entries either run the buggy loop on a short input or a
    // correctly bounded loop on a full one.
    let correct = !spec.vulnerable && rng.gen_bool(0.5);
    let written = if spec.vulnerable {
        n + k
    } else if correct {
        n
    } else {
        rng.gen_range(1..n)
    };
    let top = b.label("loop");
    let test = b.label("test");
    let done = b.label("done");
    match spec.template {
        Template::ReadLoop => {
            b.line("store [i], 0");
            b.line(format!("jmp {test}"));
            b.place(&top);
            b.line("input [tmp], 4");
            b.line("load r1, [tmp]");
            b.line("cmp [tmp], 0xffffffff");
            b.line(format!("je {done}"));
            b.line("load r0, [i]");
            b.line("store [buf + r0*4], r1");
            b.line("add [total], r1");
            b.line("add [i], 1");
            b.place(&test);
            if correct {
                b.line(format!("cmp [i], {n}"));
                b.line(format!("jl {top}"));
            } else {
                b.line(format!("cmp [i], {}", n + k - 1));
                b.line(format!("jle {top}"));
            }
            b.place(&done);
            for _ in 0..written {
                let v = value(rng);
                b.input.push(v);
            }
            if written < if correct { n } else { n + k } {
                b.input.push(-1);
            }
        }
        Template::CopyLen => {
            let fill = b.label("fill");
            b.line("mov r0, 0");
            b.place(&fill);
            b.line("mov r2, r0");
            b.line("add r2, r0");
            b.line("add r2, 7");
            b.line("store [src + r0*4], r2");
            b.line("add r0, 1");
            b.line(format!("cmp r0, {}", n + 4));
            b.line(format!("jl {fill}"));
            b.line("input [len], 4");
            b.line("load r3, [len]");
            if correct {
                let ok = b.label("ok");
                b.line(format!("cmp r3, {n}"));
                b.line(format!("jle {ok}"));
                b.line(format!("mov r3, {n}"));
                b.place(&ok);
            }
            b.line("mov r0, 0");
            b.line(format!("jmp {test}"));
            b.place(&top);
            b.line("load r1, [src + r0*4]");
            b.line("store [buf + r0*4], r1");
            b.line("add r0, 1");
            b.place(&test);
            b.line("cmp r0, r3");
            b.line(format!("jl {top}"));
            b.place(&done);
            b.input.push(if correct { rng.gen_range(n..n + k + 1) } else { written });
        }
        Template::FillConst => {
            let c = value(rng);
            b.line("input [len], 4");
            b.line("load r3, [len]");
            if correct {
                let ok = b.label("ok");
                b.line(format!("cmp r3, {n}"));
                b.line(format!("jle {ok}"));
                b.line(format!("mov r3, {n}"));
                b.place(&ok);
            }
            b.line("mov r0, 0");
            b.line(format!("jmp {test}"));
            b.place(&top);
            b.line(format!("store [buf + r0*4], {c}"));
            b.line("add r0, 1");
            b.place(&test);
            b.line("cmp r0, r3");
            b.line(format!("jl {top}"));
            b.place(&done);
            b.input.push(if correct { rng.gen_range(n..n + k + 1) } else { written });
        }
        Template::PrefixSum => {
            b.line("input [len], 4");
            b.line("mov r0, 0");
            b.line("mov r4, 0");
            b.line(format!("jmp {test}"));
            b.place(&top);
            b.line("input [tmp], 4");
            b.line("add r4, [tmp]");
            b.line("store [buf + r0*4], r4");
            b.line("add r0, 1");
            b.place(&test);
            if correct {
                b.line(format!("cmp r0, {n}"));
                b.line(format!("jge {done}"));
            }
            b.line("cmp r0, [len]");
            b.line(format!("jl {top}"));
            b.place(&done);
            let len = if correct { rng.gen_range(n..n + k + 1) } else { written };
            b.input.push(len);
            for _ in 0..len.min(if correct { n } else { len }) {
                let v = value(rng);
                b.input.push(v);
            }
        }
        Template::WordCopy => {
            b.line("mov r0, 0");
            b.place(&top);
            b.line("input [tmp], 4");
            b.line("load r1, [tmp]");
            b.line("cmp r1, 0");
            b.line(format!("je {done}"));
            if correct {
                b.line(format!("cmp r0, {n}"));
                b.line(format!("jge {done}"));
            }
            b.line("store [buf + r0*4], r1");
            b.line("add r0, 1");
            b.line(format!("jmp {top}"));
            b.place(&done);
            let len = if correct { rng.gen_range(n..n + k + 1) } else { written };
            for _ in 0..len {
                let v = value(rng);
                b.input.push(v);
            }
            b.input.push(0);
        }
    }
}

/// Indexed initialisation loop over `words` elements of `name`.
fn emit_fill(b: &mut Builder, name: &str, words: u32, val: &str) {
    let top = b.label("init");
    b.line("mov r5, 0");
    b.place(&top);
    b.line(format!("store [{name} + r5*4], {val}"));
    b.line("add r5, 1");
    b.line(format!("cmp r5, {words}"));
    b.line(format!("jl {top}"));
}

fn emit_distractor(b: &mut Builder, idx: u32, rng: &mut ChaCha8Rng) {
    let region = *Region::ALL.choose(rng).unwrap();
    match rng.gen_range(0..3) {
        0 => {
            let m = rng.gen_range(2..6);
            let name = format!("aux{idx}");
            let acc = format!("acc{idx}");
            b.var(&name, region, 4 * m);
            b.var(&acc, region, 4);
            let fill = b.label("dfill");
            let sum = b.label("dsum");
            b.line("mov r5, 0");
            b.place(&fill);
            b.line(format!("store [{name} + r5*4], r5"));
            b.line("add r5, 1");
            b.line(format!("cmp r5, {m}"));
            b.line(format!("jl {fill}"));
            b.line(format!("store [{acc}], 0"));
            b.line("mov r5, 0");
            b.place(&sum);
            b.line(format!("load r6, [{name} + r5*4]"));
            b.line(format!("add [{acc}], r6"));
            b.line("add r5, 1");
            b.line(format!("cmp r5, {m}"));
            b.line(format!("jl {sum}"));
        }
        1 => {
            let x = format!("x{idx}");
            let y = format!("y{idx}");
            b.var(&x, region, 4);
            b.var(&y, region, 4);
            let skip = b.label("dskip");
            b.line(format!("store [{x}], {}", value(rng)));
            b.line(format!("load r7, [{x}]"));
            b.line(format!("add r7, {}", rng.gen_range(1..50)));
            b.line(format!("cmp r7, {}", value(rng)));
            b.line(format!("jl {skip}"));
            b.line(format!("sub r7, {}", rng.gen_range(1..50)));
            b.place(&skip);
            b.line(format!("store [{y}], r7"));
        }
        _ => {
            let cnt = format!("cnt{idx}");
            b.var(&cnt, region, 4);
            let top = b.label("dcnt");
            let m = rng.gen_range(2..8);
            b.line(format!("store [{cnt}], 0"));
            b.place(&top);
            b.line(format!("add [{cnt}], 1"));
            b.line(format!("cmp [{cnt}], {m}"));
            b.line(format!("jl {top}"));
        }
    }
}

fn build_entry(spec: &Spec, max_distractors: u32, rng: &mut ChaCha8Rng) -> (Program, Vec<u8>) {
    let mut b = Builder { vars: String::new(), code: String::new(), input: Vec::new(), label: 0 };
    let r = spec.region;
    let n = spec.n;
    // Helper scalars live below the buffer; the victim sits directly above it.
    for (name, size) in [("i", 4), ("tmp", 4), ("len", 4), ("total", 4)] {
        b.var(name, Region::Stack, size);
    }
    if spec.template == Template::CopyLen {
        b.var("src", Region::Global, 4 * (n + 4));
    }
    b.var("buf", r, 4 * n);
    let victim_words = rng.gen_range(spec.extra.max(1)..=4);
    b.var("victim", r, 4 * victim_words);
    b.var("out", r, 4);

    let mut main = std::mem::take(&mut b.code);
    if victim_words > 1 && rng.gen_bool(0.5) {
        let c = value(rng);
        emit_fill(&mut b, "victim", victim_words, &format!("{c}"));
    } else {
        for w in 0..victim_words {
            b.line(format!("store [victim + {}], {}", 4 * w, value(rng)));
        }
    }
    b.line("store [total], 0");
    if rng.gen_bool(0.5) {
        emit_fill(&mut b, "buf", n, "0");
    }
    let distractors = rng.gen_range(0..=max_distractors);
    let before = rng.gen_range(0..=distractors);
    for d in 0..before {
        emit_distractor(&mut b, d, rng);
    }
    main.push_str(&std::mem::take(&mut b.code));
    emit_template(&mut b, spec, rng);
    main.push_str(&std::mem::take(&mut b.code));
    for d in before..distractors {
        emit_distractor(&mut b, d, rng);
    }
    if rng.gen_bool(0.5) {
        let sum = b.label("rsum");
        b.line("mov r5, 0");
        b.place(&sum);
        b.line("load r6, [buf + r5*4]");
        b.line("add [total], r6");
        b.line("add r5, 1");
        b.line(format!("cmp r5, {}", rng.gen_range(1..=n)));
        b.line(format!("jl {sum}"));
    }
    if rng.gen_bool(0.3) {
        b.line("load r9, [victim]");
        b.line(format!("add r9, {}", rng.gen_range(1..100)));
        b.line("store [victim], r9");
    }
    main.push_str(&std::mem::take(&mut b.code));
    main.push_str("    load r8, [victim]\n");
    if spec.floated {
        main.push_str("    .float\n");
    }
    let _ = writeln!(main, "    add r8, {}", rng.gen_range(1..100));
    main.push_str("    store [out], r8\n    halt\n");
    let source = format!("{}{}", b.vars, main);
    let program = assemble(&source).expect("generated programs assemble");
    (program, int_input(&b.input))
}

/// Generates `cfg.count` entries, exactly `round(count * frac_vuln)` of them
/// vulnerable, deterministically from `seed`.
pub fn gen_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<CorpusEntry>, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_vuln = (cfg.count as f64 * cfg.frac_vuln).round() as usize;
    let weights = [cfg.regions.stack, cfg.regions.global, cfg.regions.heap];
    let regions = [Region::Stack, Region::Global, Region::Heap];
    let mut plan: Vec<(bool, Region)> = Vec::with_capacity(cfg.count);
    for (vulnerable, total) in [(true, n_vuln), (false, cfg.count - n_vuln)] {
        for (region, c) in regions.iter().zip(apportion(total, &weights)) {
            plan.extend(std::iter::repeat_n((vulnerable, *region), c));
        }
    }
    plan.shuffle(&mut rng);

    let run_cfg = RunConfig::default();
    let mut entries = Vec::with_capacity(cfg.count);
    for (id, (vulnerable, region)) in plan.into_iter().enumerate() {
        let spec = Spec {
            template: *cfg.templates.choose(&mut rng).unwrap(),
            region,
            n: rng.gen_range(cfg.buf_elems.0..=cfg.buf_elems.1),
            extra: rng.gen_range(cfg.overflow_elems.0..=cfg.overflow_elems.1),
            vulnerable,
            floated: rng.gen_bool(cfg.frac_floated),
        };
        let (program, input) = build_entry(&spec, cfg.max_distractors, &mut rng);
        let out = run(&program, &input, Mode::Plain, &run_cfg)
            .map_err(|e| CorpusError::Generation { id, reason: e.to_string() })?;
        if out.fault.is_some() {
            return Err(CorpusError::Generation { id, reason: "run faulted".into() });
        }
        if out.overflows.is_empty() == vulnerable {
            return Err(CorpusError::Generation {
                id,
                reason: format!("expected vulnerable={vulnerable}, found {} points", out.overflows.len()),
            });
        }
        entries.push(CorpusEntry {
            id,
            program_id: id,
            template: spec.template,
            region,
            program,
            input,
            ground_truth: out.overflows,
            is_vulnerable: vulnerable,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_echo() {
        let cfg = CorpusConfig { count: 10, frac_vuln: 0.5, ..Default::default() };
        let c = gen_corpus(&cfg, 7).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.iter().filter(|e| e.is_vulnerable).count(), 5);
        for e in &c {
            assert_eq!(e.is_vulnerable, !e.ground_truth.is_empty());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = CorpusConfig { count: 20, ..Default::default() };
        assert_eq!(gen_corpus(&cfg, 3).unwrap(), gen_corpus(&cfg, 3).unwrap());
        assert_ne!(gen_corpus(&cfg, 3).unwrap(), gen_corpus(&cfg, 4).unwrap());
    }

    #[test]
    fn infeasible_configs_rejected() {
        for cfg in [
            CorpusConfig { frac_vuln: 1.5, ..Default::default() },
            CorpusConfig { buf_elems: (8, 4), ..Default::default() },
            CorpusConfig { overflow_elems: (1, 9), ..Default::default() },
            CorpusConfig { templates: vec![], ..Default::default() },
            CorpusConfig { regions: RegionMix { stack: 0.0, global: 0.0, heap: 0.0 }, ..Default::default() },
        ] {
            assert!(matches!(gen_corpus(&cfg, 1), Err(CorpusError::Infeasible(_))));
        }
    }

    #[test]
    fn every_template_and_region_appears() {
        let c = gen_corpus(&CorpusConfig { count: 90, ..Default::default() }, 11).unwrap();
        for t in Template::ALL {
            assert!(c.iter().any(|e| e.template == t && e.is_vulnerable), "{t:?}");
        }
        for r in Region::ALL {
            assert!(c.iter().any(|e| e.region == r && e.is_vulnerable), "{r:?}");
        }
    }

    #[test]
    fn overflows_are_silent_writes_into_the_victim() {
        let c = gen_corpus(&CorpusConfig { count: 60, ..Default::default() }, 5).unwrap();
        for e in c.iter().filter(|e| e.is_vulnerable) {
            for p in &e.ground_truth {
                assert!(p.write);
                assert_eq!(p.corrupted_var.as_deref(), Some("victim"));
            }
        }
    }

    #[test]
    fn instrumented_replay_matches_ground_truth() {
        let c = gen_corpus(&CorpusConfig { count: 40, ..Default::default() }, 9).unwrap();
        for e in &c {
            let out = run(&e.program, &e.input, Mode::Instrumented, &RunConfig::default()).unwrap();
            assert!(out.fault.is_none());
            assert_eq!(out.overflows, e.ground_truth, "entry {}", e.id);
        }
    }

    #[test]
    fn entries_round_trip_as_json() {
        let c = gen_corpus(&CorpusConfig { count: 6, ..Default::default() }, 2).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: Vec<CorpusEntry> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(5, &[1.0, 0.0, 0.0]), vec![5, 0, 0]);
    }
}

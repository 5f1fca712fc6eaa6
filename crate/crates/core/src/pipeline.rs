//! Corpus entry to labelled graph.

use thiserror::Error;

use crate::graph::{build_graph, BuildError, DFGPlus, SupportMaps};
use crate::isa::{run, CorpusEntry, Layout, Mode, OverflowPoint, Program, RunConfig, SimError};
use crate::trace::{strip_instrumentation, TraceError, VulnMark};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("run faulted at instruction {0}")]
    Fault(usize),
}

/// A graph together with everything needed to score and localize it.
#[derive(Debug, Clone)]
pub struct EntryGraph {
    pub entry_id: usize,
    pub program_id: usize,
    pub graph: DFGPlus,
    pub maps: SupportMaps,
    pub ground_truth: Vec<OverflowPoint>,
    /// Placement of the run the graph was built from.
    pub layout: Layout,
    pub var_names: Vec<String>,
}

impl EntryGraph {
    /// Name of the variable owning `addr` in the run's layout.
    pub fn var_at(&self, addr: u64) -> Option<&str> {
        self.layout.owner(addr).map(|i| self.var_names[i].as_str())
    }
}

/// Runs `program` and builds its labelled graph.
///
/// Instrumented runs are labelled from their markers. Plain runs carry no
/// markers and are labelled from the bounds check of the interpreter instead;
/// in a plain trace every executed instruction is one record, so the step of
/// an overflow point is the seq of its record.
pub fn labelled_graph(
    program: &Program,
    input: &[u8],
    mode: Mode,
    cfg: &RunConfig,
) -> Result<(DFGPlus, SupportMaps, Vec<OverflowPoint>, Layout), PipelineError> {
    let out = run(program, input, mode, cfg)?;
    if let Some(f) = out.fault {
        return Err(PipelineError::Fault(f.insn));
    }
    let (trace, marks) = match mode {
        Mode::Instrumented => strip_instrumentation(&out.trace)?,
        Mode::Plain => {
            let marks = out.overflows.iter().map(|p| VulnMark { seq: p.step }).collect();
            (out.trace, marks)
        }
    };
    let (graph, maps) = build_graph(&trace, Some(&marks), &out.shadow)?;
    Ok((graph, maps, out.overflows, out.layout))
}

pub fn entry_graph(entry: &CorpusEntry, mode: Mode, cfg: &RunConfig) -> Result<EntryGraph, PipelineError> {
    let (graph, maps, ground_truth, layout) = labelled_graph(&entry.program, &entry.input, mode, cfg)?;
    Ok(EntryGraph {
        entry_id: entry.id,
        program_id: entry.program_id,
        graph,
        maps,
        ground_truth,
        layout,
        var_names: entry.program.data_layout.iter().map(|v| v.name.clone()).collect(),
    })
}

//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;

use sbof_core::graph::select_samples;
use sbof_core::isa::{gen_corpus, CorpusConfig, Mode, RunConfig};
use sbof_core::pipeline::{entry_graph, EntryGraph};
use sbof_core::CorpusEntry;

/// A fixed corpus of `count` entries.
pub fn corpus(count: usize) -> Vec<CorpusEntry> {
    gen_corpus(&CorpusConfig { count, ..CorpusConfig::default() }, 42).expect("default config is feasible")
}

/// The largest vulnerable graph of a small corpus and its balanced samples.
pub fn large_graph() -> (EntryGraph, BTreeSet<u32>) {
    let g = corpus(40)
        .iter()
        .filter(|e| e.is_vulnerable)
        .map(|e| entry_graph(e, Mode::Instrumented, &RunConfig::default()).expect("corpus entries build"))
        .max_by_key(|g| g.graph.len())
        .expect("corpus has vulnerable entries");
    let samples = select_samples(&g.graph, 1.0, 0).expect("vulnerable graph has samples");
    (g, samples)
}

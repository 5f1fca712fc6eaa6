//! Silent buffer overflow detection from execution traces.
//!
//! Programs for a small ISA are run (optionally with redzones), their traces
//! are turned into DFG+ data-flow graphs, and a bi-directional relational GCN
//! classifies the graph nodes. Predicted vulnerable nodes map back to the
//! instruction that overflowed and the variable it corrupted.

pub mod eval;
pub mod graph;
pub mod isa;
pub mod model;
pub mod pipeline;
pub mod trace;

pub use graph::{DFGPlus, Edge, Label, Node, NodeKind, Relation, SubgraphSample, SupportMaps};
pub use isa::{CorpusEntry, Program, ShadowMap};
pub use model::{ModelConfig, ModelParams};
pub use trace::{Trace, TraceRecord};

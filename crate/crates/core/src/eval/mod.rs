//! Metrics, graph-level cross-validation, ablations and localization.

mod localize;
mod metrics;

pub use localize::{localize, score_findings, Detection, Finding};
pub use metrics::{compute_metrics, Metrics};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{cut, select_samples_pooled, CutError, DFGPlus, Label, SubgraphSample};
use crate::model::{
    predict, predict_graph, train, FeatureMode, LossConfig, ModelConfig, ModelError, OptimizerConfig, Variant,
};
use crate::pipeline::EntryGraph;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    Empty,
    #[error("k must be at least 2")]
    BadK,
    #[error("{k}-fold cross-validation needs at least {k} graphs, got {n}")]
    TooFewGraphs { k: usize, n: usize },
    #[error("fold {fold}: {source}")]
    Model { fold: usize, source: ModelError },
    #[error("fold {fold}: {source}")]
    Cut { fold: usize, source: CutError },
    #[error("fold {fold}: training split has no labelled samples")]
    NoTrainingData { fold: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeSet {
    All,
    DflowOnly,
}

impl std::str::FromStr for EdgeSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(EdgeSet::All),
            "dflow-only" => Ok(EdgeSet::DflowOnly),
            other => Err(format!("unknown edge set `{other}`")),
        }
    }
}

/// Everything that defines one cross-validated training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub opt: OptimizerConfig,
    /// Benign samples drawn per vulnerable sample.
    pub neg_ratio: f64,
    pub subgraphs_per_graph: usize,
    pub edges: EdgeSet,
    /// Train on the graphs of a single program only.
    pub one_program: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            opt: OptimizerConfig::default(),
            neg_ratio: 1.0,
            subgraphs_per_graph: 1,
            edges: EdgeSet::All,
            one_program: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Indices of the test graphs.
    pub test: Vec<usize>,
    /// Node-level metrics over the test sample nodes.
    pub metrics: Metrics,
    pub detection: Detection,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    pub mean: Metrics,
    pub detection: Detection,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed.wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(b.wrapping_mul(0xd6e8_feb8_6659_fd93));
    z = (z ^ (z >> 32)).wrapping_mul(0xd6e8_feb8_6659_fd93);
    z ^ (z >> 32)
}

/// Shuffles `n` graph indices and deals them into `k` folds.
pub fn fold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 {
        return Err(EvalError::BadK);
    }
    if n < k {
        return Err(EvalError::TooFewGraphs { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, g) in idx.into_iter().enumerate() {
        folds[i % k].push(g);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn view(g: &EntryGraph, edges: EdgeSet) -> DFGPlus {
    match edges {
        EdgeSet::All => g.graph.clone(),
        EdgeSet::DflowOnly => g.graph.dflow_only(),
    }
}

fn subgraphs(
    graphs: &[EntryGraph],
    idx: &[usize],
    exp: &ExperimentConfig,
    seed: u64,
    fold: usize,
) -> Result<Vec<SubgraphSample>, EvalError> {
    let views: Vec<DFGPlus> = idx.iter().map(|&i| view(&graphs[i], exp.edges)).collect();
    let refs: Vec<&DFGPlus> = views.iter().collect();
    let samples = select_samples_pooled(&refs, exp.neg_ratio, seed).map_err(|source| EvalError::Cut { fold, source })?;
    let mut out = Vec::new();
    for ((g, s), &origin) in views.iter().zip(&samples).zip(idx) {
        if s.is_empty() {
            continue;
        }
        let pieces = cut(g, s, exp.subgraphs_per_graph.max(1), exp.model.steps(), origin)
            .map_err(|source| EvalError::Cut { fold, source })?;
        out.extend(pieces);
    }
    Ok(out)
}

/// Training graphs of the program with the most vulnerable training graphs.
fn single_program(graphs: &[EntryGraph], train: &[usize]) -> Vec<usize> {
    let mut by_program: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &i in train {
        let e = by_program.entry(graphs[i].program_id).or_default();
        e.0 += usize::from(graphs[i].graph.count_label(Label::Vulnerable) > 0);
        e.1 += 1;
    }
    let Some((&program, _)) = by_program.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
        return Vec::new();
    };
    train.iter().copied().filter(|&i| graphs[i].program_id == program).collect()
}

/// Corrupted variable of each overflowing instruction of `g`.
fn corrupted_vars(g: &EntryGraph) -> BTreeMap<u64, BTreeSet<String>> {
    let mut out: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for p in &g.ground_truth {
        if let Some(v) = &p.corrupted_var {
            out.entry(p.insn as u64).or_default().insert(v.clone());
        }
    }
    out
}

fn run_fold(
    graphs: &[EntryGraph],
    folds: &[Vec<usize>],
    f: usize,
    exp: &ExperimentConfig,
    seed: u64,
) -> Result<FoldResult, EvalError> {
    let k = folds.len();
    let test = &folds[f];
    let val = &folds[(f + 1) % k];
    let mut train_idx: Vec<usize> =
        (0..k).filter(|&j| j != f && j != (f + 1) % k).flat_map(|j| folds[j].iter().copied()).collect();
    train_idx.sort_unstable();
    if exp.one_program {
        train_idx = single_program(graphs, &train_idx);
    }
    let train_subs = subgraphs(graphs, &train_idx, exp, mix(seed, f as u64, 0), f)?;
    let val_subs = subgraphs(graphs, val, exp, mix(seed, f as u64, 1), f)?;
    let test_subs = subgraphs(graphs, test, exp, mix(seed, f as u64, 2), f)?;
    if train_subs.is_empty() {
        return Err(EvalError::NoTrainingData { fold: f });
    }
    let opt = OptimizerConfig { seed: mix(seed, f as u64, 3), ..exp.opt.clone() };
    let (params, history) =
        train(&train_subs, &val_subs, &exp.model, &exp.loss, &opt).map_err(|source| EvalError::Model { fold: f, source })?;

    let mut pairs = Vec::new();
    for s in &test_subs {
        let preds = predict(std::slice::from_ref(s), &params, &exp.model)
            .map_err(|source| EvalError::Model { fold: f, source })?;
        for &id in &s.sample_ids {
            let row = s.nodes.binary_search(&id).expect("sample in subgraph");
            pairs.push((preds[&id].label == Label::Vulnerable, s.labels[row] == Label::Vulnerable));
        }
    }
    let metrics = compute_metrics(pairs)?;

    let mut detection = Detection::default();
    for &i in test {
        let eg = &graphs[i];
        let g = view(eg, exp.edges);
        let preds = predict_graph(&g, &params, &exp.model).map_err(|source| EvalError::Model { fold: f, source })?;
        let findings = localize(&g, &eg.maps, &preds);
        let truth = corrupted_vars(eg);
        let d = score_findings(&g, &eg.maps, &findings, |insn, addr| {
            eg.var_at(addr).is_some_and(|v| truth.get(&insn).is_some_and(|s| s.contains(v)))
        });
        detection.merge(&d);
    }
    Ok(FoldResult { fold: f, test: test.clone(), metrics, detection, best_epoch: history.best_epoch })
}

/// Graph-level k-fold cross-validation: fold `f` tests, fold `f + 1`
/// validates and the rest train. Negatives are drawn per split and fold.
pub fn kfold(graphs: &[EntryGraph], k: usize, exp: &ExperimentConfig, seed: u64) -> Result<KFoldReport, EvalError> {
    let folds = fold_splits(graphs.len(), k, seed)?;
    let results: Vec<FoldResult> =
        (0..k).into_par_iter().map(|f| run_fold(graphs, &folds, f, exp, seed)).collect::<Result<_, _>>()?;
    let mean = Metrics::mean(&results.iter().map(|r| r.metrics).collect::<Vec<_>>());
    let mut detection = Detection::default();
    for r in &results {
        detection.merge(&r.detection);
    }
    Ok(KFoldReport { folds: results, mean, detection })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    Brgcn,
    Rgcn,
    ConvGnn,
    DfOnly,
    NodeId,
    OneProgram,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::Brgcn,
        AblationRow::Rgcn,
        AblationRow::ConvGnn,
        AblationRow::DfOnly,
        AblationRow::NodeId,
        AblationRow::OneProgram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Brgcn => "brgcn",
            AblationRow::Rgcn => "rgcn",
            AblationRow::ConvGnn => "convgnn",
            AblationRow::DfOnly => "brgcn-dflow-only",
            AblationRow::NodeId => "brgcn-node-id",
            AblationRow::OneProgram => "brgcn-one-program",
        }
    }

    /// `base` adjusted for this row.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut exp = base.clone();
        exp.model.variant = Variant::Brgcn;
        match self {
            AblationRow::Brgcn => {}
            AblationRow::Rgcn => exp.model.variant = Variant::Rgcn,
            AblationRow::ConvGnn => exp.model.variant = Variant::ConvGnn,
            AblationRow::DfOnly => exp.edges = EdgeSet::DflowOnly,
            AblationRow::NodeId => exp.model = exp.model.with_features(FeatureMode::NodeId),
            AblationRow::OneProgram => exp.one_program = true,
        }
        exp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub metrics: Metrics,
    pub detection: Detection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    /// Mean F1 of `row` over seeds.
    pub fn mean_f1(&self, row: AblationRow) -> f64 {
        let f: Vec<f64> = self.results.iter().filter(|r| r.row == row).map(|r| r.metrics.f1).collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,seed,accuracy,precision,recall,f1,detection_rate\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.row.name(),
                r.seed,
                r.metrics.accuracy,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                r.detection.rate()
            ));
        }
        out
    }
}

/// Cross-validates every row of `rows` for every seed on the same splits.
pub fn run_ablations(
    graphs: &[EntryGraph],
    k: usize,
    base: &ExperimentConfig,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<AblationTable, EvalError> {
    let jobs: Vec<(AblationRow, u64)> = rows.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(row, seed)| {
            let rep = kfold(graphs, k, &row.apply(base), seed)?;
            Ok(AblationResult { row, seed, metrics: rep.mean, detection: rep.detection })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(AblationTable { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_cover_every_graph_once() {
        let folds = fold_splits(86, 8, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..86).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 10 || f.len() == 11));
        assert_eq!(folds, fold_splits(86, 8, 1).unwrap());
    }

    #[test]
    fn two_graphs_two_folds() {
        let folds = fold_splits(2, 2, 0).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), [1, 1]);
    }

    #[test]
    fn bad_k_rejected() {
        assert_eq!(fold_splits(5, 1, 0), Err(EvalError::BadK));
        assert_eq!(fold_splits(3, 4, 0), Err(EvalError::TooFewGraphs { k: 4, n: 3 }));
    }

    #[test]
    fn ablation_rows_adjust_config() {
        let base = ExperimentConfig::default();
        assert_eq!(AblationRow::Rgcn.apply(&base).model.variant, Variant::Rgcn);
        assert_eq!(AblationRow::DfOnly.apply(&base).edges, EdgeSet::DflowOnly);
        assert_eq!(AblationRow::NodeId.apply(&base).model.dims[0], crate::model::NODE_ID_BUCKETS);
        assert!(AblationRow::OneProgram.apply(&base).one_program);
    }
}

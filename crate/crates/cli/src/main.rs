//! `sbof`: corpus generation, tracing, graph building, training and
//! evaluation from the command line.
//!
//! Every command writes one machine-readable result to `--out` and a short
//! summary to standard error. Exit status is 0 on success, 1 on a domain
//! error and 2 on a usage error.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sbof_core::eval::{kfold, localize, run_ablations, AblationRow, EdgeSet, ExperimentConfig, Finding};
use sbof_core::graph::{
    build_graph, cut, load_graph, select_samples, select_samples_pooled, serialize_graph, serialize_subgraphs,
};
use sbof_core::isa::{assemble, run, Mode, ShadowMap};
use sbof_core::model::{
    load_checkpoint, predict_graph, save_checkpoint, train, FeatureMode, NodePrediction, OptimizerConfig, Variant,
};
use sbof_core::pipeline::{entry_graph, EntryGraph};
use sbof_core::trace::{parse_trace, strip_instrumentation, write_trace};
use sbof_core::{CorpusEntry, DFGPlus, Label, SupportMaps};
use serde::{Deserialize, Serialize};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "sbof", version, about = "Silent buffer overflow detection on execution traces")]
struct Cli {
    /// Pipeline config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Instrumented,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Instrumented => Mode::Instrumented,
        }
    }
}

/// Model overrides applied on top of the config.
#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    features: Option<FeatureMode>,
    #[arg(long)]
    edges: Option<EdgeSet>,
}

impl ModelArgs {
    fn apply(&self, exp: &mut ExperimentConfig) {
        if let Some(v) = self.variant {
            exp.model.variant = v;
        }
        if let Some(f) = self.features {
            exp.model = exp.model.clone().with_features(f);
        }
        if let Some(e) = self.edges {
            exp.edges = e;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, one JSON file per entry.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a corpus entry or an assembly file and write its trace as JSON lines.
    Trace {
        #[arg(long, conflicts_with = "program")]
        entry: Option<PathBuf>,
        #[arg(long, requires = "out")]
        program: Option<PathBuf>,
        /// Raw input bytes for `--program`.
        #[arg(long, requires = "program")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "instrumented")]
        mode: ModeArg,
        /// Trace file; the shadow map goes next to it as `<stem>.shadow.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a DFG+ from a corpus entry or from a trace.
    BuildGraph {
        #[arg(long, conflicts_with = "trace")]
        entry: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Shadow map of `--trace`; defaults to its `.shadow.json` sibling.
        #[arg(long, requires = "trace")]
        shadow: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "instrumented")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select sample nodes of a graph and cut it into subgraphs.
    Cut {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 1)]
        parts: usize,
        /// Defaults to the model's message-passing depth.
        #[arg(long)]
        hops: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every graph in a directory and write a checkpoint.
    Train {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
        /// Per-epoch loss and F1 as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-node labels of a graph under a checkpoint.
    Predict {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        edges: Option<EdgeSet>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group predicted-vulnerable nodes into overflow findings.
    Locate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Graph-level k-fold cross-validation over a corpus directory.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        folds: usize,
        #[arg(long, value_enum, default_value = "instrumented")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every ablation row over the configured seeds, as CSV.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        folds: usize,
        #[arg(long, value_enum, default_value = "instrumented")]
        mode: ModeArg,
        /// Replaces the config's seeds; repeat for several.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    node: u32,
    label: Label,
    prob: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn read_entry(path: &Path) -> Result<CorpusEntry> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing corpus entry {}", path.display()))
}

fn read_graph(path: &Path) -> Result<(DFGPlus, SupportMaps)> {
    load_graph(&read(path)?).with_context(|| format!("loading graph {}", path.display()))
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        bail!("no .json files in {}", dir.display());
    }
    Ok(files)
}

fn shadow_path(trace: &Path) -> PathBuf {
    trace.with_extension("shadow.json")
}

fn view(g: &DFGPlus, edges: EdgeSet) -> DFGPlus {
    match edges {
        EdgeSet::All => g.clone(),
        EdgeSet::DflowOnly => g.dflow_only(),
    }
}

fn corpus_graphs(dir: &Path, mode: Mode, cfg: &PipelineConfig) -> Result<Vec<EntryGraph>> {
    json_files(dir)?
        .iter()
        .map(|p| {
            let e = read_entry(p)?;
            entry_graph(&e, mode, &cfg.run).with_context(|| format!("building graph of {}", p.display()))
        })
        .collect()
}

fn with_workers<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(job)),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { seed, out } => {
            let entries = sbof_core::isa::gen_corpus(&cfg.corpus, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for e in &entries {
                write(&out.join(format!("entry-{:04}.json", e.id)), &to_json(e)?)?;
            }
            let vulnerable = entries.iter().filter(|e| e.is_vulnerable).count();
            eprintln!("wrote {} entries ({vulnerable} vulnerable) to {}", entries.len(), out.display());
        }
        Command::Trace { entry, program, input, mode, out } => {
            let (program, bytes) = match (entry, program) {
                (Some(e), _) => {
                    let e = read_entry(&e)?;
                    (e.program, e.input)
                }
                (None, Some(p)) => {
                    let prog = assemble(&read(&p)?).with_context(|| format!("assembling {}", p.display()))?;
                    let bytes = match input {
                        Some(i) => fs::read(&i).with_context(|| format!("reading {}", i.display()))?,
                        None => Vec::new(),
                    };
                    (prog, bytes)
                }
                (None, None) => bail!("one of --entry or --program is required"),
            };
            let result = run(&program, &bytes, mode.into(), &cfg.run)?;
            let mut buf = Vec::new();
            write_trace(&result.trace, &mut buf)?;
            write(&out, std::str::from_utf8(&buf)?)?;
            write(&shadow_path(&out), &to_json(&result.shadow)?)?;
            eprintln!(
                "{} records, {} steps, {} overflow point(s){}",
                result.trace.len(),
                result.steps,
                result.overflows.len(),
                result.fault.map(|f| format!(", fault at instruction {}", f.insn)).unwrap_or_default()
            );
        }
        Command::BuildGraph { entry, trace, shadow, mode, out } => {
            let (g, maps) = match (entry, trace) {
                (Some(e), _) => {
                    let eg = entry_graph(&read_entry(&e)?, mode.into(), &cfg.run)?;
                    (eg.graph, eg.maps)
                }
                (None, Some(t)) => {
                    let file = fs::File::open(&t).with_context(|| format!("opening {}", t.display()))?;
                    let trace = parse_trace(BufReader::new(file))?;
                    let shadow_file = shadow.unwrap_or_else(|| shadow_path(&t));
                    let shadow: ShadowMap = serde_json::from_str(&read(&shadow_file)?)
                        .with_context(|| format!("parsing shadow map {}", shadow_file.display()))?;
                    if trace.has_markers() {
                        let (stripped, marks) = strip_instrumentation(&trace)?;
                        build_graph(&stripped, Some(&marks), &shadow)?
                    } else {
                        build_graph(&trace, None, &shadow)?
                    }
                }
                (None, None) => bail!("one of --entry or --trace is required"),
            };
            write(&out, &serialize_graph(&g, &maps))?;
            eprintln!(
                "{} nodes, {} edges, {} vulnerable",
                g.len(),
                g.edges.len(),
                g.count_label(Label::Vulnerable)
            );
        }
        Command::Cut { graph, parts, hops, seed, out } => {
            let (g, _) = read_graph(&graph)?;
            let exp = &cfg.experiment;
            let samples = select_samples(&g, exp.neg_ratio, seed)?;
            let subs = cut(&g, &samples, parts, hops.unwrap_or(exp.model.steps()), 0)?;
            write(&out, &serialize_subgraphs(&subs))?;
            let sizes: Vec<usize> = subs.iter().map(|s| s.nodes.len()).collect();
            eprintln!("{} samples in {} subgraph(s) of sizes {sizes:?}", samples.len(), subs.len());
        }
        Command::Train { graphs, seed, model, history, out } => {
            let mut exp = cfg.experiment.clone();
            model.apply(&mut exp);
            let loaded: Vec<DFGPlus> = json_files(&graphs)?
                .iter()
                .map(|p| read_graph(p).map(|(g, _)| view(&g, exp.edges)))
                .collect::<Result<_>>()?;
            let refs: Vec<&DFGPlus> = loaded.iter().collect();
            let samples = select_samples_pooled(&refs, exp.neg_ratio, seed)?;
            let mut subs = Vec::new();
            for (i, (g, s)) in loaded.iter().zip(&samples).enumerate() {
                if !s.is_empty() {
                    subs.extend(cut(g, s, exp.subgraphs_per_graph.max(1), exp.model.steps(), i)?);
                }
            }
            if subs.is_empty() {
                bail!("no labelled samples in {}", graphs.display());
            }
            let opt = OptimizerConfig { seed, ..exp.opt.clone() };
            let (params, hist) = train(&subs, &[], &exp.model, &exp.loss, &opt)?;
            write(&out, &save_checkpoint(&exp.model, &params))?;
            if let Some(h) = history {
                write(&h, &hist.to_csv())?;
            }
            let last = hist.epochs.last();
            eprintln!(
                "trained on {} graphs ({} subgraphs), best epoch {}, final loss {:.4}",
                loaded.len(),
                subs.len(),
                hist.best_epoch,
                last.map(|e| e.loss).unwrap_or(f64::NAN)
            );
        }
        Command::Predict { graph, ckpt, edges, out } => {
            let (g, _) = read_graph(&graph)?;
            let (model, params) = load_checkpoint(&read(&ckpt)?)?;
            let g = view(&g, edges.unwrap_or(cfg.experiment.edges));
            let preds = predict_graph(&g, &params, &model)?;
            let records: Vec<PredictionRecord> =
                preds.iter().map(|(&node, p)| PredictionRecord { node, label: p.label, prob: p.prob }).collect();
            write(&out, &to_json(&records)?)?;
            let positive = records.iter().filter(|r| r.label == Label::Vulnerable).count();
            eprintln!("{} nodes, {positive} predicted vulnerable", records.len());
        }
        Command::Locate { graph, preds, out } => {
            let (g, maps) = read_graph(&graph)?;
            let records: Vec<PredictionRecord> =
                serde_json::from_str(&read(&preds)?).with_context(|| format!("parsing {}", preds.display()))?;
            let preds: BTreeMap<u32, NodePrediction> =
                records.iter().map(|r| (r.node, NodePrediction { label: r.label, prob: r.prob })).collect();
            let findings: Vec<Finding> = localize(&g, &maps, &preds);
            write(&out, &to_json(&findings)?)?;
            if findings.is_empty() {
                eprintln!("no overflow found");
            }
            for f in &findings {
                eprintln!(
                    "instruction {} corrupts {:#x} (confidence {:.3}, {} node(s))",
                    f.overflow_point,
                    f.corrupted_addr,
                    f.confidence,
                    f.node_ids.len()
                );
            }
        }
        Command::Eval { corpus, folds, mode, seed, workers, model, out } => {
            let mut exp = cfg.experiment.clone();
            model.apply(&mut exp);
            let graphs = corpus_graphs(&corpus, mode.into(), &cfg)?;
            let report = with_workers(workers, || kfold(&graphs, folds, &exp, seed))??;
            write(&out, &to_json(&report)?)?;
            let m = &report.mean;
            let d = &report.detection;
            eprintln!(
                "{folds}-fold over {} graphs: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4}; detected {}/{} overflow points, {} with the right address, {} false finding(s)",
                graphs.len(),
                m.accuracy,
                m.precision,
                m.recall,
                m.f1,
                d.detected,
                d.vulnerabilities,
                d.addr_correct,
                d.false_findings
            );
        }
        Command::Ablate { corpus, folds, mode, seed, workers, out } => {
            let seeds = if seed.is_empty() { cfg.seeds.clone() } else { seed };
            if seeds.is_empty() {
                bail!("no seeds given");
            }
            let graphs = corpus_graphs(&corpus, mode.into(), &cfg)?;
            let table =
                with_workers(workers, || run_ablations(&graphs, folds, &cfg.experiment, &AblationRow::ALL, &seeds))??;
            write(&out, &table.to_csv())?;
            for row in AblationRow::ALL {
                eprintln!("{:<18} mean F1 {:.4}", row.name(), table.mean_f1(row));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

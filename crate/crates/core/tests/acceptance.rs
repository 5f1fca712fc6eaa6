//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any of them fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbof_core::eval::{run_ablations, AblationRow, AblationTable, ExperimentConfig};
use sbof_core::graph::{
    build_graph, cut, map_overflow_byte, restore_adjacent, select_samples, Label, NodeKind, Relation, Toward,
};
use sbof_core::isa::samples::{int_input, AGES_LOOP};
use sbof_core::isa::{assemble, gen_corpus, run, CorpusConfig, Mode, RedZone, Region, RunConfig, ShadowMap};
use sbof_core::model::{backward, forward, init_params, loss, GraphInput, LossConfig, ModelConfig, Variant};
use sbof_core::pipeline::{entry_graph, EntryGraph};
use sbof_core::{DFGPlus, ModelParams, SubgraphSample};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
const FD_FLOOR: f64 = 1e-6;
const FD_PASS_FRACTION: f64 = 0.999;
const DENSE_TOL: f64 = 1e-10;
const CUT_TOL: f64 = 1e-8;
const PERM_TOL: f64 = 1e-12;
const MIN_F1: f64 = 0.90;
const MIN_DETECTION: f64 = 0.90;
const MIN_GAP: f64 = 0.02;
const SEEDS: [u64; 3] = [1, 2, 3];
const CORPUS_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(t: Instant, budget: Duration) -> bool {
    t.elapsed() <= budget
}

fn variant_config(variant: Variant, dropout: f64) -> ModelConfig {
    ModelConfig { variant, dropout, ..ModelConfig::default() }
}

fn all_nodes(g: &DFGPlus) -> BTreeSet<u32> {
    (0..g.len() as u32).collect()
}

/// Direct evaluation of the propagation rule with dense adjacency, written
/// independently of the sparse engine.
fn dense_forward(g: &DFGPlus, params: &ModelParams, variant: Variant) -> Vec<Vec<f64>> {
    let n = g.len();
    let nrel = Relation::COUNT;
    // adj[r][i][j] = 1 when j -> i carries relation r
    let mut adj = vec![vec![vec![0.0; n]; n]; nrel];
    for e in &g.edges {
        adj[e.rel.index()][e.dst as usize][e.src as usize] = 1.0;
    }
    let deg_in = |r: &[usize], i: usize| -> f64 { r.iter().map(|&r| (0..n).map(|j| adj[r][i][j]).sum::<f64>()).sum() };
    let deg_out = |r: &[usize], i: usize| -> f64 { r.iter().map(|&r| (0..n).map(|j| adj[r][j][i]).sum::<f64>()).sum() };
    let groups: Vec<Vec<usize>> = match variant {
        Variant::ConvGnn => vec![(0..nrel).collect()],
        _ => (0..nrel).map(|r| vec![r]).collect(),
    };
    let mut h: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|node| {
            let mut x = vec![0.0; 4];
            x[node.kind.index()] = 1.0;
            x
        })
        .collect();
    let steps = params.layers.len();
    for (l, layer) in params.layers.iter().enumerate() {
        let d_out = layer.w_self.ncols();
        let mut z = vec![vec![0.0; d_out]; n];
        let vec_mat = |v: &[f64], w: &Array2<f64>, c: f64, out: &mut [f64]| {
            for (a, &va) in v.iter().enumerate() {
                for (b, o) in out.iter_mut().enumerate() {
                    *o += c * va * w[[a, b]];
                }
            }
        };
        for i in 0..n {
            let mut zi = vec![0.0; d_out];
            vec_mat(&h[i], &layer.w_self, 1.0, &mut zi);
            for (gi, group) in groups.iter().enumerate() {
                let cin = deg_in(group, i);
                let cout = deg_out(group, i);
                for j in 0..n {
                    let a_in: f64 = group.iter().map(|&r| adj[r][i][j]).sum();
                    if a_in > 0.0 {
                        vec_mat(&h[j], &layer.w_in[gi], a_in / cin, &mut zi);
                    }
                    if variant != Variant::Rgcn {
                        let a_out: f64 = group.iter().map(|&r| adj[r][j][i]).sum();
                        if a_out > 0.0 {
                            vec_mat(&h[j], &layer.w_out[gi], a_out / cout, &mut zi);
                        }
                    }
                }
            }
            z[i] = zi;
        }
        h = if l + 1 == steps {
            z.into_iter()
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                })
                .collect()
        } else {
            z.into_iter().map(|row| row.into_iter().map(|v| v.max(0.0)).collect()).collect()
        };
    }
    h
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lcfg = LossConfig { w_benign: 1.0, w_vuln: 2.5 };
    let variants = [Variant::Brgcn, Variant::Rgcn, Variant::ConvGnn];
    let (mut checked, mut ok, mut worst) = (0usize, 0usize, 0.0f64);
    for gi in 0..20 {
        let n = rng.gen_range(8..=40);
        let g = common::random_graph(&mut rng, n, 2.0, true);
        let cfg = variant_config(variants[gi % 3], 0.1);
        let input = GraphInput::new(&SubgraphSample::whole(&g, &all_nodes(&g), 0), &cfg).unwrap();
        let params = init_params(&cfg, gi as u64).unwrap();
        let drop_seed = 1000 + gi as u64;
        let eval = |p: &ModelParams| {
            let probs = forward(&input, p, &cfg, Some(&mut ChaCha8Rng::seed_from_u64(drop_seed))).unwrap();
            loss(&probs, &input.targets, &lcfg).unwrap()
        };
        let (_, grads) =
            backward(&input, &params, &cfg, &lcfg, &input.targets, 1.0, Some(&mut ChaCha8Rng::seed_from_u64(drop_seed)))
                .unwrap();
        let analytic: Vec<f64> = grads.matrices().flat_map(|m| m.iter().copied().collect::<Vec<_>>()).collect();
        for idx in rand::seq::index::sample(&mut rng, analytic.len(), 400.min(analytic.len())) {
            let nudge = |delta: f64| {
                let mut p = params.clone();
                let mut k = idx;
                for m in p.matrices_mut() {
                    if k < m.len() {
                        let v = m.iter_mut().nth(k).unwrap();
                        *v += delta;
                        break;
                    }
                    k -= m.len();
                }
                eval(&p)
            };
            let fd = (nudge(FD_STEP) - nudge(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
            ok += usize::from(rel < FD_REL_TOL);
        }
    }
    let frac = ok as f64 / checked as f64;
    let pass = frac >= FD_PASS_FRACTION && within(t, Duration::from_secs(60));
    outcome(pass, format!("{ok}/{checked} entries within {FD_REL_TOL:e} ({:.4}%), worst {worst:.2e}, {:.1?}", 100.0 * frac, t.elapsed()))
}

fn dense_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for gi in 0..50 {
        let n = rng.gen_range(3..=40);
        let g = common::random_graph(&mut rng, n, 2.5, false);
        for variant in [Variant::Brgcn, Variant::Rgcn, Variant::ConvGnn] {
            let cfg = variant_config(variant, 0.0);
            let params = init_params(&cfg, 100 + gi).unwrap();
            let input = GraphInput::new(&SubgraphSample::whole(&g, &all_nodes(&g), 0), &cfg).unwrap();
            let sparse = forward(&input, &params, &cfg, None).unwrap();
            let dense = dense_forward(&g, &params, variant);
            for (i, row) in dense.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    worst = worst.max((sparse[[i, k]] - v).abs());
                }
            }
        }
    }
    let pass = worst <= DENSE_TOL && within(t, Duration::from_secs(10));
    outcome(pass, format!("max |sparse - dense| {worst:.2e} over 50 graphs x 3 variants, {:.1?}", t.elapsed()))
}

fn cut_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = variant_config(Variant::Brgcn, 0.0);
    let params = init_params(&cfg, 7).unwrap();
    let (mut worst, mut samples_checked, mut smaller) = (0.0f64, 0usize, 0usize);
    for gi in 0..20 {
        let n = rng.gen_range(30..=120);
        let g = common::random_graph(&mut rng, n, 1.2, true);
        let samples = select_samples(&g, 1.0, gi).unwrap();
        let full = forward(&GraphInput::new(&SubgraphSample::whole(&g, &samples, 0), &cfg).unwrap(), &params, &cfg, None)
            .unwrap();
        let parts = rng.gen_range(1..=6);
        for sub in cut(&g, &samples, parts, cfg.steps(), 0).unwrap() {
            smaller += usize::from(sub.nodes.len() < g.len());
            let probs = forward(&GraphInput::new(&sub, &cfg).unwrap(), &params, &cfg, None).unwrap();
            for &s in &sub.sample_ids {
                let row = sub.nodes.binary_search(&s).unwrap();
                for k in 0..2 {
                    worst = worst.max((probs[[row, k]] - full[[s as usize, k]]).abs());
                }
                samples_checked += 1;
            }
        }
    }
    let pass = worst <= CUT_TOL && within(t, Duration::from_secs(60));
    outcome(
        pass,
        format!("{samples_checked} sample nodes, {smaller} proper subgraphs, max diff {worst:.2e}, {:.1?}", t.elapsed()),
    )
}

/// Node `i` of `a` corresponds to node `i` of `b`.
fn identical(a: &EntryGraph, b: &EntryGraph) -> bool {
    let mut ea = a.graph.edges.clone();
    let mut eb = b.graph.edges.clone();
    ea.sort();
    eb.sort();
    a.graph.len() == b.graph.len()
        && a.graph.nodes.iter().zip(&b.graph.nodes).all(|(x, y)| x.kind == y.kind && x.label == y.label)
        && a.maps.node_to_insn == b.maps.node_to_insn
        && ea == eb
}

fn restoration(entries: &[sbof_core::CorpusEntry], instrumented: &[EntryGraph]) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::default();
    const J: u64 = 0x1000;
    let fig4 = ShadowMap::from_zones([
        RedZone { id: 1, lo: J, hi: J + 4 },
        RedZone { id: 2, lo: J + 8, hi: J + 12 },
        RedZone { id: 3, lo: J + 20, hi: J + 24 },
        RedZone { id: 4, lo: J + 28, hi: J + 32 },
    ])
    .unwrap();
    let fig4_ok = restore_adjacent(J + 12, Toward::Lower, &fig4) == Ok(J + 7)
        && map_overflow_byte(J + 21, J + 19, &fig4) == Ok(J + 25);
    let mut matched = 0;
    let mut vulnerable = 0;
    for (e, inst) in entries.iter().zip(instrumented) {
        let plain = entry_graph(e, Mode::Plain, &cfg).unwrap();
        matched += usize::from(identical(&plain, inst));
        vulnerable += usize::from(inst.graph.count_label(Label::Vulnerable) > 0);
    }
    let pass = fig4_ok && matched == entries.len() && entries.len() >= 50 && within(t, Duration::from_secs(120));
    outcome(
        pass,
        format!(
            "{matched}/{} entries ({vulnerable} with overflows) match node for node, restoration examples {}, {:.1?}",
            entries.len(),
            if fig4_ok { "ok" } else { "wrong" },
            t.elapsed()
        ),
    )
}

fn permutation_equivariance(graphs: &[EntryGraph]) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cfg = variant_config(Variant::Brgcn, 0.0);
    let params = init_params(&cfg, 9).unwrap();
    let mut worst = 0.0f64;
    for eg in graphs.iter().take(10) {
        let g = &eg.graph;
        let base = forward(&GraphInput::new(&SubgraphSample::whole(g, &all_nodes(g), 0), &cfg).unwrap(), &params, &cfg, None)
            .unwrap();
        for _ in 0..100 {
            let perm = common::permutation(&mut rng, g.len());
            let mut pg = g.permuted(&perm);
            pg.edges.shuffle(&mut rng);
            let probs =
                forward(&GraphInput::new(&SubgraphSample::whole(&pg, &all_nodes(&pg), 0), &cfg).unwrap(), &params, &cfg, None)
                    .unwrap();
            for i in 0..g.len() {
                for k in 0..2 {
                    worst = worst.max((probs[[perm[i] as usize, k]] - base[[i, k]]).abs());
                }
            }
        }
    }
    outcome(worst <= PERM_TOL, format!("max diff {worst:.2e} over 10 graphs x 100 permutations, {:.1?}", t.elapsed()))
}

fn desk_scale(entries: &[sbof_core::CorpusEntry], table: &AblationTable) -> Outcome {
    let vulnerable = entries.iter().filter(|e| e.is_vulnerable).count();
    let regions: BTreeSet<&str> = entries.iter().map(|e| e.region.name()).collect();
    let corpus_ok = entries.len() >= 200 && 2 * vulnerable == entries.len() && regions.len() == Region::ALL.len();
    let runs: Vec<_> = table.results.iter().filter(|r| r.row == AblationRow::Brgcn).collect();
    let mut pass = corpus_ok && !runs.is_empty();
    let mut parts = vec![format!("{} programs, {vulnerable} vulnerable, regions {regions:?}", entries.len())];
    for r in runs {
        let d = &r.detection;
        pass &= r.metrics.f1 >= MIN_F1 && d.rate() >= MIN_DETECTION;
        parts.push(format!(
            "seed {}: F1 {:.4} acc {:.4} detected {}/{} ({:.1}%), address correct {}",
            r.seed,
            r.metrics.f1,
            r.metrics.accuracy,
            d.detected,
            d.vulnerabilities,
            100.0 * d.rate(),
            d.addr_correct
        ));
    }
    outcome(pass, parts.join("; "))
}

fn ablation_ordering(table: &AblationTable) -> Outcome {
    let f = |r: AblationRow| table.mean_f1(r);
    let means: Vec<String> = AblationRow::ALL.iter().map(|&r| format!("{} {:.4}", r.name(), f(r))).collect();
    let pairs = [
        (AblationRow::Brgcn, AblationRow::Rgcn),
        (AblationRow::Rgcn, AblationRow::ConvGnn),
        (AblationRow::Brgcn, AblationRow::DfOnly),
        (AblationRow::Brgcn, AblationRow::NodeId),
        (AblationRow::Brgcn, AblationRow::OneProgram),
    ];
    let mut pass = true;
    let mut gaps = Vec::new();
    for (hi, lo) in pairs {
        let gap = f(hi) - f(lo);
        let ok = gap >= MIN_GAP;
        pass &= ok;
        gaps.push(format!("{} - {} = {gap:+.4}{}", hi.name(), lo.name(), if ok { "" } else { " (short)" }));
    }
    outcome(pass, format!("mean F1 over seeds {SEEDS:?}: {}; gaps: {}", means.join(", "), gaps.join(", ")))
}

fn code2_structure() -> Outcome {
    let p = assemble(AGES_LOOP).unwrap();
    let out = run(&p, &int_input(&[21, 34, 55, 89, 13, -1]), Mode::Plain, &RunConfig::default()).unwrap();
    let (g, m) = build_graph(&out.trace, None, &out.shadow).unwrap();
    let insn = |id: u32| m.node_to_insn[id as usize];
    let kind = |id: u32| g.nodes[id as usize].kind;
    let has = |s: u32, d: u32, rel: Relation| g.edges.iter().any(|e| e.src == s && e.dst == d && e.rel == rel);
    let at = |i: u64, k: NodeKind| -> Vec<u32> { (0..g.len() as u32).filter(|&n| insn(n) == i && kind(n) == k).collect() };

    // (a) sub sp, 0x94
    let sp = at(0, NodeKind::RNode);
    let a = sp.iter().any(|&u| sp.iter().any(|&v| has(u, v, Relation::DEdge) && has(u, v, Relation::REdge)));
    // (b) store [i], 0 and store [total], 0 sit side by side
    let (i_node, total_node) = (at(1, NodeKind::MNode), at(2, NodeKind::MNode));
    let b = i_node.iter().any(|&u| total_node.iter().any(|&v| has(u, v, Relation::AEdge) || has(v, u, Relation::AEdge)));
    // (c) load r0, [i] indexes store [ages + r0*4]
    let (index, slots) = (at(8, NodeKind::RNode), at(9, NodeKind::MNode));
    let c = !slots.is_empty() && slots.iter().all(|&s| index.iter().any(|&r| has(r, s, Relation::IEdge)));
    // (d) both compares feed their flags node from both operands; `age` was
    // last defined by input, so its live node is external
    let d = [6u64, 12].iter().all(|&cmp| {
        let flags = at(cmp, NodeKind::RNode);
        !flags.is_empty()
            && flags.iter().all(|&f| {
                let srcs: Vec<u32> = g.edges.iter().filter(|e| e.dst == f && e.rel == Relation::CEdge).map(|e| e.src).collect();
                srcs.iter().any(|&s| matches!(kind(s), NodeKind::MNode | NodeKind::ENode))
                    && srcs.iter().any(|&s| kind(s) == NodeKind::INode)
            })
    });
    let mark = |x: bool| if x { "ok" } else { "missing" };
    outcome(
        a && b && c && d,
        format!(
            "(a) sp DEdge+REdge {}, (b) AEdge i/total {}, (c) IEdge index->slot {}, (d) CEdges into flags {}",
            mark(a),
            mark(b),
            mark(c),
            mark(d)
        ),
    )
}

fn main() {
    let mut lines: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((n, name, o));
    };
    report(1, "gradient correctness", gradient_check());
    report(2, "dense-oracle equivalence", dense_equivalence());
    report(3, "graph-cut exactness", cut_exactness());

    let entries = gen_corpus(&CorpusConfig::default(), CORPUS_SEED).unwrap();
    let run_cfg = RunConfig::default();
    let graphs: Vec<EntryGraph> = entries.iter().map(|e| entry_graph(e, Mode::Instrumented, &run_cfg).unwrap()).collect();
    report(4, "restoration isomorphism", restoration(&entries, &graphs));
    report(5, "permutation equivariance", permutation_equivariance(&graphs));

    let t = Instant::now();
    let table = run_ablations(&graphs, 8, &ExperimentConfig::default(), &AblationRow::ALL, &SEEDS).unwrap();
    let elapsed = t.elapsed();
    let mut desk = desk_scale(&entries, &table);
    desk.pass &= elapsed <= Duration::from_secs(30 * 60);
    desk.detail.push_str(&format!("; all rows and seeds in {elapsed:.1?}"));
    report(6, "learning at desk scale", desk);
    report(7, "ablation ordering", ablation_ordering(&table));
    report(8, "structural check on the ages loop", code2_structure());

    let failed: Vec<usize> = lines.iter().filter(|l| !l.2.pass).map(|l| l.0).collect();
    if failed.is_empty() {
        println!("all criteria passed");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

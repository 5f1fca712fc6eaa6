mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbof_core::graph::{
    cut, load_graph, load_subgraphs, restore_adjacent, select_samples, serialize_graph, serialize_subgraphs, Toward,
};
use sbof_core::isa::{gen_corpus, run, CorpusConfig, Mode, RedZone, RunConfig, ShadowMap};
use sbof_core::model::{forward, init_params, GraphInput, ModelConfig};
use sbof_core::pipeline::entry_graph;
use sbof_core::trace::{parse_trace, serialize_trace, strip_instrumentation};
use sbof_core::SubgraphSample;

fn small_corpus(seed: u64) -> Vec<sbof_core::CorpusEntry> {
    gen_corpus(&CorpusConfig { count: 6, ..CorpusConfig::default() }, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn traces_round_trip_through_jsonl(seed in 0u64..10_000, instrumented in any::<bool>()) {
        let mode = if instrumented { Mode::Instrumented } else { Mode::Plain };
        for e in small_corpus(seed) {
            let out = run(&e.program, &e.input, mode, &RunConfig::default()).unwrap();
            let text = serialize_trace(&out.trace);
            prop_assert_eq!(parse_trace(text.as_bytes()).unwrap(), out.trace);
        }
    }

    #[test]
    fn stripping_is_idempotent(seed in 0u64..10_000) {
        for e in small_corpus(seed) {
            let out = run(&e.program, &e.input, Mode::Instrumented, &RunConfig::default()).unwrap();
            let (once, marks) = strip_instrumentation(&out.trace).unwrap();
            let (twice, again) = strip_instrumentation(&once).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(again.is_empty());
            prop_assert_eq!(marks.len(), out.overflows.len());
        }
    }

    #[test]
    fn instrumented_and_plain_graphs_coincide(seed in 0u64..10_000) {
        let cfg = RunConfig::default();
        for e in small_corpus(seed) {
            let a = entry_graph(&e, Mode::Plain, &cfg).unwrap();
            let b = entry_graph(&e, Mode::Instrumented, &cfg).unwrap();
            prop_assert_eq!(&a.graph, &b.graph);
            prop_assert_eq!(&a.maps.node_to_insn, &b.maps.node_to_insn);
        }
    }

    #[test]
    fn graph_json_round_trips(seed in 0u64..10_000, n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &small_corpus(seed)[0];
        let g = entry_graph(e, Mode::Instrumented, &RunConfig::default()).unwrap();
        let (g2, m2) = load_graph(&serialize_graph(&g.graph, &g.maps)).unwrap();
        prop_assert_eq!(&g2, &g.graph);
        prop_assert_eq!(&m2, &g.maps);

        let r = common::random_graph(&mut rng, n, 2.0, true);
        let samples = select_samples(&r, 1.0, seed).unwrap();
        let subs = cut(&r, &samples, 3, 2, 0).unwrap();
        prop_assert_eq!(load_subgraphs(&serialize_subgraphs(&subs)).unwrap(), subs);
    }

    #[test]
    fn cut_partitions_samples_and_grows_with_hops(seed in 0u64..10_000, n in 2usize..80, parts in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, n, 1.5, true);
        let samples = select_samples(&g, 1.0, seed).unwrap();
        let mut prev: Option<Vec<SubgraphSample>> = None;
        for hops in 0..4 {
            let subs = cut(&g, &samples, parts, hops, 0).unwrap();
            prop_assert!(subs.len() <= parts);
            let mut seen = BTreeSet::new();
            for s in &subs {
                for &id in &s.sample_ids {
                    prop_assert!(seen.insert(id));
                }
                prop_assert!(s.edges.iter().all(|e| s.nodes.binary_search(&e.src).is_ok() && s.nodes.binary_search(&e.dst).is_ok()));
            }
            prop_assert_eq!(&seen, &samples);
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&subs) {
                    prop_assert_eq!(&a.sample_ids, &b.sample_ids);
                    prop_assert!(a.nodes.iter().all(|x| b.nodes.binary_search(x).is_ok()));
                }
            }
            prev = Some(subs);
        }
    }

    #[test]
    fn predictions_are_permutation_equivariant(seed in 0u64..10_000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, n, 2.0, false);
        let perm = common::permutation(&mut rng, n);
        let pg = g.permuted(&perm);
        let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
        let params = init_params(&cfg, seed).unwrap();
        let everything = |len: usize| (0..len as u32).collect::<BTreeSet<u32>>();
        let a = forward(&GraphInput::new(&SubgraphSample::whole(&g, &everything(n), 0), &cfg).unwrap(), &params, &cfg, None).unwrap();
        let b = forward(&GraphInput::new(&SubgraphSample::whole(&pg, &everything(n), 0), &cfg).unwrap(), &params, &cfg, None).unwrap();
        for i in 0..n {
            for k in 0..2 {
                prop_assert!((a[[i, k]] - b[[perm[i] as usize, k]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn restoration_matches_scan(sizes in prop::collection::vec((1u64..12, 1u64..12), 1..6)) {
        // alternate redzone and variable runs starting at 0x100
        let mut zones = Vec::new();
        let mut at = 0x100u64;
        for (i, &(rz, var)) in sizes.iter().enumerate() {
            zones.push(RedZone { id: i as u32, lo: at, hi: at + rz });
            at += rz + var;
        }
        let shadow = ShadowMap::from_zones(zones).unwrap();
        let addressable: Vec<u64> = (0xf0..at + 8).filter(|&a| !shadow.is_redzone(a)).collect();
        for w in addressable.windows(3) {
            prop_assert_eq!(restore_adjacent(w[1], Toward::Lower, &shadow), Ok(w[0]));
            prop_assert_eq!(restore_adjacent(w[1], Toward::Higher, &shadow), Ok(w[2]));
        }
    }
}

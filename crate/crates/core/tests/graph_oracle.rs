//! Graph construction checked against brute-force references.

mod common;

use std::collections::BTreeMap;

use common::graph_ref;
use poigraph::datamodel::{sessionize, synth_generate, Dataset, Split, SynthConfig};
use poigraph::numerics::checkpoint::stored_digest;
use poigraph::graphbuild::{build_graph, count_windows, pmi_edges, query_edges, GraphConfig, HeteroGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn counts_and_pmi_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &n in &[1usize, 10, 100, 1000] {
        let seqs = graph_ref::random_sessions(&mut rng, n, 40);
        let fast = count_windows(&seqs, false);
        let slow = graph_ref::counts(&seqs);
        assert_eq!(fast.total, slow.total);
        assert_eq!(fast.single, slow.single);
        assert_eq!(fast.pair, slow.pair);
        if fast.total == 0 {
            continue;
        }
        let edges = pmi_edges(&fast, true).unwrap();
        assert_eq!(edges.len(), slow.pair.len());
        for (i, j, w) in edges {
            assert!((w - graph_ref::pmi(&slow, i, j)).abs() < 1e-12);
        }
        let reversed: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().rev().copied().collect()).collect();
        assert_eq!(count_windows(&reversed, false), fast);
    }
}

#[test]
fn top_queries_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &n in &[5usize, 200, 2000] {
        let pairs = graph_ref::random_query_pairs(&mut rng, n, 30);
        let fast = query_edges(pairs.iter().map(|(q, p)| (q.as_str(), *p)), 4);
        let slow = graph_ref::top_queries(&pairs, 4);
        let mut got: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
        for (p, q, w) in fast.edges {
            got.entry(p).or_default().push((fast.queries[q].clone(), w));
        }
        for (p, mut want) in slow {
            want.sort_by(|a, b| a.0.cmp(&b.0));
            let mut have = got.remove(&p).unwrap();
            have.sort_by(|a, b| a.0.cmp(&b.0));
            assert_eq!(have.len(), want.len());
            for ((hq, hw), (wq, ww)) in have.iter().zip(&want) {
                assert_eq!(hq, wq);
                assert!((hw - ww).abs() < 1e-12);
            }
        }
        assert!(got.is_empty());
    }
}

fn synthetic_train() -> Dataset {
    let out = synth_generate(&SynthConfig::default()).unwrap();
    let sessions = sessionize(&out.records, 1800);
    Dataset::new(out.catalog, sessions, Split::Train).unwrap()
}

#[test]
fn synthetic_graph_invariants_and_round_trip() {
    let train = synthetic_train();
    let g = build_graph(&train, &GraphConfig::default(), 3).unwrap();
    g.validate().unwrap();
    assert_eq!(g.num_pois(), 200);
    assert!(!g.app.is_empty() && !g.apq.is_empty());
    assert_eq!(g, build_graph(&train, &GraphConfig::default(), 3).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    g.save(&a).unwrap();
    g.save(&b).unwrap();
    for f in ["manifest.json", "data.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let back = HeteroGraph::load(&a).unwrap();
    assert_eq!(back, g);
    assert_eq!(g.digest().unwrap(), stored_digest(&a).unwrap());
    assert_eq!(back.node_emb.data(), g.node_emb.data());
}

#[test]
fn corrupted_graph_files_are_rejected() {
    let g = build_graph(&synthetic_train(), &GraphConfig::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g");
    g.save(&p).unwrap();
    let manifest = std::fs::read_to_string(p.join("manifest.json")).unwrap();

    let older = manifest.replacen("\"version\": 1", "\"version\": 0", 1);
    assert_ne!(older, manifest);
    std::fs::write(p.join("manifest.json"), &older).unwrap();
    let err = HeteroGraph::load(&p).unwrap_err().to_string();
    assert!(err.contains("version 0") && err.contains("version 1"), "{err}");

    std::fs::write(p.join("manifest.json"), &manifest).unwrap();
    let blob = std::fs::read(p.join("data.bin")).unwrap();
    std::fs::write(p.join("data.bin"), &blob[..blob.len() - 8]).unwrap();
    assert!(HeteroGraph::load(&p).is_err());
}

#[test]
fn singleton_sessions_give_no_poi_edges() {
    let out = synth_generate(&SynthConfig::default()).unwrap();
    let sessions = sessionize(&out.records, 1800)
        .into_iter()
        .flat_map(|s| {
            s.records
                .into_iter()
                .map(move |r| poigraph::datamodel::Session {
                    user_id: r.user_id.clone(),
                    records: vec![r],
                })
        })
        .collect();
    let ds = Dataset::new(out.catalog, sessions, Split::Train).unwrap();
    let g = build_graph(&ds, &GraphConfig::default(), 1).unwrap();
    assert!(g.app.is_empty());
    g.validate().unwrap();
}

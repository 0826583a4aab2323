//! Brute-force window counting, PMI and top-k query selection.

use std::collections::BTreeMap;

use rand::Rng;

pub struct RefCounts {
    pub total: u64,
    pub single: BTreeMap<usize, u64>,
    pub pair: BTreeMap<(usize, usize), u64>,
}

/// Materializes every window as a member list and counts by direct scans.
pub fn counts(seqs: &[Vec<usize>]) -> RefCounts {
    let windows: Vec<Vec<usize>> = seqs
        .iter()
        .flat_map(|s| (1..s.len()).map(move |i| vec![s[i - 1], s[i]]))
        .collect();
    let mut nodes: Vec<usize> = windows.iter().flatten().copied().collect();
    nodes.sort_unstable();
    nodes.dedup();
    let mut single = BTreeMap::new();
    for &p in &nodes {
        let n = windows.iter().filter(|w| w.contains(&p)).count() as u64;
        single.insert(p, n);
    }
    let mut pair = BTreeMap::new();
    for (a, &i) in nodes.iter().enumerate() {
        for &j in &nodes[a + 1..] {
            let n = windows.iter().filter(|w| w.contains(&i) && w.contains(&j)).count() as u64;
            if n > 0 {
                pair.insert((i, j), n);
            }
        }
    }
    RefCounts {
        total: windows.len() as u64,
        single,
        pair,
    }
}

pub fn pmi(c: &RefCounts, i: usize, j: usize) -> f64 {
    let w = c.total as f64;
    let joint = c.pair[&(i, j)] as f64 / w;
    let pi = c.single[&i] as f64 / w;
    let pj = c.single[&j] as f64 / w;
    (joint / (pi * pj)).ln()
}

/// For each POI, its top-`k` `(query, weight)` list.
pub fn top_queries(pairs: &[(String, usize)], k: usize) -> BTreeMap<usize, Vec<(String, f64)>> {
    let mut out = BTreeMap::new();
    let mut pois: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    pois.sort_unstable();
    pois.dedup();
    for p in pois {
        let mut qs: Vec<String> = pairs.iter().filter(|x| x.1 == p).map(|x| x.0.clone()).collect();
        qs.sort();
        qs.dedup();
        let mut counted: Vec<(String, u64)> = qs
            .into_iter()
            .map(|q| {
                let n = pairs.iter().filter(|x| x.1 == p && x.0 == q).count() as u64;
                (q, n)
            })
            .collect();
        // Selection sort: highest count first, lexicographic among ties.
        let mut chosen = Vec::new();
        while chosen.len() < k && !counted.is_empty() {
            let mut best = 0;
            for i in 1..counted.len() {
                let (q, n) = &counted[i];
                let (bq, bn) = &counted[best];
                if n > bn || (n == bn && q < bq) {
                    best = i;
                }
            }
            chosen.push(counted.remove(best));
        }
        let total: u64 = chosen.iter().map(|c| c.1).sum();
        out.insert(p, chosen.into_iter().map(|(q, n)| (q, n as f64 / total as f64)).collect());
    }
    out
}

/// Random click sequences over `num_pois` POIs, including repeats.
pub fn random_sessions(rng: &mut impl Rng, num_sessions: usize, num_pois: usize) -> Vec<Vec<usize>> {
    (0..num_sessions)
        .map(|_| {
            let len = rng.gen_range(0..6);
            (0..len).map(|_| rng.gen_range(0..num_pois)).collect()
        })
        .collect()
}

pub fn random_query_pairs(rng: &mut impl Rng, n: usize, num_pois: usize) -> Vec<(String, usize)> {
    (0..n)
        .map(|_| {
            let q = format!("q{}", rng.gen_range(0..12));
            (q, rng.gen_range(0..num_pois))
        })
        .collect()
}

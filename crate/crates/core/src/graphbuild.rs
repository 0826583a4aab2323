//! Construction of the POI/query graph from click sessions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datamodel::{Catalog, Dataset, Session};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{
    container_digest, read_container, write_container, ArrayData, NamedArray,
};
use crate::numerics::{RngStreams, Tensor};
use crate::textenc::{normalize_query, TOP_QUERIES};

pub const GRAPH_FORMAT: &str = "poigraph-graph";
pub const GRAPH_VERSION: u32 = 1;

/// Window statistics over clicked-POI sequences. Pairs are keyed `(i, j)`
/// with `i < j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub total: u64,
    pub single: BTreeMap<usize, u64>,
    pub pair: BTreeMap<(usize, usize), u64>,
}

impl CooccurrenceCounts {
    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &CooccurrenceCounts) {
        self.total += other.total;
        for (&k, &v) in &other.single {
            *self.single.entry(k).or_default() += v;
        }
        for (&k, &v) in &other.pair {
            *self.pair.entry(k).or_default() += v;
        }
    }
}

/// Slides a width-2 window over each sequence. A window `[a, a]` counts
/// `a` once, or twice when `multiplicity` is set, and never forms a pair.
pub fn count_windows(seqs: &[Vec<usize>], multiplicity: bool) -> CooccurrenceCounts {
    let mut c = CooccurrenceCounts::default();
    for s in seqs {
        for w in s.windows(2) {
            let (a, b) = (w[0], w[1]);
            c.total += 1;
            if a == b {
                *c.single.entry(a).or_default() += if multiplicity { 2 } else { 1 };
            } else {
                *c.single.entry(a).or_default() += 1;
                *c.single.entry(b).or_default() += 1;
                *c.pair.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    c
}

/// `ln(p(i,j) / (p(i) p(j)))` for every co-occurring pair; non-positive
/// weights are dropped unless `keep_nonpositive`.
pub fn pmi_edges(counts: &CooccurrenceCounts, keep_nonpositive: bool) -> Result<Vec<(usize, usize, f64)>> {
    if counts.total == 0 {
        return Err(Error::EmptyCorpus("no co-occurrence windows"));
    }
    let w = counts.total as f64;
    let mut out = Vec::new();
    for (&(i, j), &n) in &counts.pair {
        let pij = n as f64 / w;
        let pi = counts.single[&i] as f64 / w;
        let pj = counts.single[&j] as f64 / w;
        let pmi = (pij / (pi * pj)).ln();
        if keep_nonpositive || pmi > 0.0 {
            out.push((i, j, pmi));
        }
    }
    Ok(out)
}

/// Query nodes and POI→query edges built from `(normalized query, poi)`
/// click pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEdges {
    /// Sorted, deduplicated query strings.
    pub queries: Vec<String>,
    /// `(poi, query index, weight)` sorted by POI then query index.
    pub edges: Vec<(usize, usize, f64)>,
}

/// Keeps each POI's `k` most frequent queries (ties by string order) and
/// normalizes their counts to sum to one.
pub fn query_edges<'a>(pairs: impl IntoIterator<Item = (&'a str, usize)>, k: usize) -> QueryEdges {
    let mut freq: BTreeMap<usize, BTreeMap<&'a str, u64>> = BTreeMap::new();
    for (q, p) in pairs {
        *freq.entry(p).or_default().entry(q).or_default() += 1;
    }
    let mut kept: Vec<(usize, Vec<(&str, u64)>)> = Vec::new();
    let mut nodes: BTreeSet<&str> = BTreeSet::new();
    for (p, qs) in freq {
        let mut qs: Vec<(&str, u64)> = qs.into_iter().collect();
        qs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        qs.truncate(k);
        nodes.extend(qs.iter().map(|q| q.0));
        kept.push((p, qs));
    }
    let queries: Vec<String> = nodes.into_iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = queries.iter().enumerate().map(|(i, q)| (q.as_str(), i)).collect();
    let mut edges = Vec::new();
    for (p, qs) in kept {
        let total: u64 = qs.iter().map(|q| q.1).sum();
        let mut row: Vec<(usize, usize, f64)> = qs
            .iter()
            .map(|&(q, c)| (p, index[q], c as f64 / total as f64))
            .collect();
        row.sort_by_key(|e| e.1);
        edges.extend(row);
    }
    QueryEdges { queries, edges }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub top_k_queries: usize,
    pub keep_nonpositive_pmi: bool,
    pub window_multiplicity: bool,
    pub d_n: usize,
    /// Drop POI-POI edges.
    pub drop_app: bool,
    /// Drop POI-query edges and query nodes.
    pub drop_apq: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            top_k_queries: TOP_QUERIES,
            keep_nonpositive_pmi: false,
            window_multiplicity: false,
            d_n: 128,
            drop_app: false,
            drop_apq: false,
        }
    }
}

/// POI nodes `0..P` followed by query nodes `P..P+Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub poi_ids: Vec<String>,
    pub queries: Vec<String>,
    /// Mean user location of each query node's training searches.
    pub query_locs: Vec<(f64, f64)>,
    /// Undirected POI-POI edges `(i, j, A^pp)` with `i < j`.
    pub app: Vec<(usize, usize, f64)>,
    /// POI→query edges `(poi, query, A^pq)`.
    pub apq: Vec<(usize, usize, f64)>,
    /// Initial node embeddings, `(P + Q) × d_n`.
    pub node_emb: Tensor<f64>,
    pub config: GraphConfig,
    pub seed: u64,
}

/// Clicked catalog positions of each session, in order.
pub fn click_sequences(sessions: &[Session], catalog: &Catalog) -> Result<Vec<Vec<usize>>> {
    sessions
        .iter()
        .map(|s| {
            s.records
                .iter()
                .filter_map(|r| r.clicked_poi_id.as_deref())
                .map(|id| catalog.require(id))
                .collect()
        })
        .collect()
}

impl HeteroGraph {
    pub fn num_pois(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_pois() + self.num_queries()
    }

    /// Query indices linked to each POI, by descending weight then index.
    pub fn poi_queries(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.num_pois()];
        for &(p, q, w) in &self.apq {
            out[p].push((q, w));
        }
        for row in &mut out {
            row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        out
    }

    /// Copy without POI-POI edges and/or without query nodes and their
    /// edges.
    pub fn restricted(&self, keep_app: bool, keep_apq: bool) -> HeteroGraph {
        let mut g = self.clone();
        if !keep_app {
            g.app.clear();
            g.config.drop_app = true;
        }
        if !keep_apq {
            let p = g.num_pois();
            g.apq.clear();
            g.queries.clear();
            g.query_locs.clear();
            let d = g.config.d_n;
            g.node_emb = Tensor::matrix(p, d, g.node_emb.data()[..p * d].to_vec())
                .expect("prefix of a valid matrix");
            g.config.drop_apq = true;
        }
        g
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let p = self.num_pois();
        let q = self.num_queries();
        if self.node_emb.shape() != [p + q, self.config.d_n] {
            return Err(Error::GraphIntegrity(format!(
                "embedding shape {:?} for {} nodes of width {}",
                self.node_emb.shape(),
                p + q,
                self.config.d_n
            )));
        }
        if self.query_locs.len() != q {
            return Err(Error::GraphIntegrity("query location count mismatch".into()));
        }
        for &(i, j, w) in &self.app {
            if i >= j || j >= p || !w.is_finite() {
                return Err(Error::GraphIntegrity(format!("bad POI-POI edge ({i}, {j}, {w})")));
            }
            if !self.config.keep_nonpositive_pmi && w <= 0.0 {
                return Err(Error::GraphIntegrity(format!("non-positive weight on ({i}, {j})")));
            }
        }
        let mut sums = vec![(0usize, 0.0f64); p];
        for &(i, k, w) in &self.apq {
            if i >= p || k >= q || !(w > 0.0 && w <= 1.0) {
                return Err(Error::GraphIntegrity(format!("bad POI-query edge ({i}, {k}, {w})")));
            }
            sums[i].0 += 1;
            sums[i].1 += w;
        }
        for (i, &(n, s)) in sums.iter().enumerate() {
            if n > self.config.top_k_queries || (n > 0 && (s - 1.0).abs() > 1e-9) {
                return Err(Error::GraphIntegrity(format!(
                    "POI {i} has {n} query edges with weight sum {s}"
                )));
            }
        }
        Ok(())
    }

    fn container_parts(&self) -> (serde_json::Value, Vec<NamedArray>) {
        let u32s = |v: Vec<usize>| ArrayData::U32(v.into_iter().map(|x| x as u32).collect());
        let edge_arrays = |prefix: &str, e: &[(usize, usize, f64)]| {
            let n = e.len();
            vec![
                NamedArray {
                    name: format!("{prefix}.src"),
                    shape: vec![n],
                    data: u32s(e.iter().map(|x| x.0).collect()),
                },
                NamedArray {
                    name: format!("{prefix}.dst"),
                    shape: vec![n],
                    data: u32s(e.iter().map(|x| x.1).collect()),
                },
                NamedArray {
                    name: format!("{prefix}.weight"),
                    shape: vec![n],
                    data: ArrayData::F64(e.iter().map(|x| x.2).collect()),
                },
            ]
        };
        let mut arrays = edge_arrays("app", &self.app);
        arrays.extend(edge_arrays("apq", &self.apq));
        arrays.push(NamedArray {
            name: "query_locs".into(),
            shape: vec![self.query_locs.len(), 2],
            data: ArrayData::F64(self.query_locs.iter().flat_map(|&(a, b)| [a, b]).collect()),
        });
        arrays.push(NamedArray {
            name: "node_emb".into(),
            shape: self.node_emb.shape().to_vec(),
            data: ArrayData::F64(self.node_emb.data().to_vec()),
        });
        let meta = json!({
            "poi_ids": self.poi_ids,
            "queries": self.queries,
            "config": self.config,
            "seed": self.seed,
        });
        (meta, arrays)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (meta, arrays) = self.container_parts();
        write_container(path, GRAPH_FORMAT, GRAPH_VERSION, meta, &arrays)
    }

    /// Content digest; equals the manifest digest of the saved file.
    pub fn digest(&self) -> Result<String> {
        let (meta, arrays) = self.container_parts();
        container_digest(GRAPH_FORMAT, GRAPH_VERSION, meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path, GRAPH_FORMAT, GRAPH_VERSION)?;
        let bad = |m: &str| Error::load(path, m.to_string());
        let get = |name: &str| c.array(name).ok_or_else(|| bad(&format!("missing array `{name}`")));
        let u32s = |name: &str| -> Result<Vec<usize>> {
            match &get(name)?.data {
                ArrayData::U32(v) => Ok(v.iter().map(|&x| x as usize).collect()),
                _ => Err(bad(&format!("`{name}` is not u32"))),
            }
        };
        let f64s = |name: &str| -> Result<Vec<f64>> {
            match &get(name)?.data {
                ArrayData::F64(v) => Ok(v.clone()),
                _ => Err(bad(&format!("`{name}` is not f64"))),
            }
        };
        let edges = |prefix: &str| -> Result<Vec<(usize, usize, f64)>> {
            let s = u32s(&format!("{prefix}.src"))?;
            let d = u32s(&format!("{prefix}.dst"))?;
            let w = f64s(&format!("{prefix}.weight"))?;
            if s.len() != d.len() || s.len() != w.len() {
                return Err(bad("edge arrays differ in length"));
            }
            Ok(s.into_iter().zip(d).zip(w).map(|((a, b), c)| (a, b, c)).collect())
        };
        let meta_field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| bad(&format!("missing `{k}`")));
        let poi_ids: Vec<String> = serde_json::from_value(meta_field("poi_ids")?)?;
        let queries: Vec<String> = serde_json::from_value(meta_field("queries")?)?;
        let config: GraphConfig = serde_json::from_value(meta_field("config")?)?;
        let seed: u64 = serde_json::from_value(meta_field("seed")?)?;
        let locs = f64s("query_locs")?;
        let emb = get("node_emb")?;
        let g = HeteroGraph {
            poi_ids,
            queries,
            query_locs: locs.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
            app: edges("app")?,
            apq: edges("apq")?,
            node_emb: Tensor::new(emb.shape.clone(), f64s("node_emb")?)?,
            config,
            seed,
        };
        g.validate().map_err(|e| Error::load(path, e.to_string()))?;
        Ok(g)
    }
}

/// Builds the graph from a training split; every catalog POI becomes a node.
pub fn build_graph(train: &Dataset, config: &GraphConfig, seed: u64) -> Result<HeteroGraph> {
    let catalog = &train.catalog;
    let seqs = click_sequences(&train.sessions, catalog)?;
    let counts = count_windows(&seqs, config.window_multiplicity);
    let app = if config.drop_app || counts.total == 0 {
        Vec::new()
    } else {
        pmi_edges(&counts, config.keep_nonpositive_pmi)?
    };

    let clicked: Vec<(String, usize, f64, f64)> = train
        .clicked_records()
        .map(|r| {
            let p = catalog.require(r.clicked_poi_id.as_deref().expect("clicked"))?;
            Ok((normalize_query(&r.query_text), p, r.user_lat, r.user_lon))
        })
        .collect::<Result<_>>()?;
    let qe = if config.drop_apq {
        QueryEdges {
            queries: Vec::new(),
            edges: Vec::new(),
        }
    } else {
        query_edges(clicked.iter().map(|c| (c.0.as_str(), c.1)), config.top_k_queries)
    };

    let mut loc_sum: HashMap<&str, (f64, f64, f64)> = HashMap::new();
    for q in &qe.queries {
        loc_sum.insert(q.as_str(), (0.0, 0.0, 0.0));
    }
    for r in train.records() {
        let q = normalize_query(&r.query_text);
        if let Some(e) = loc_sum.get_mut(q.as_str()) {
            e.0 += r.user_lat;
            e.1 += r.user_lon;
            e.2 += 1.0;
        }
    }
    let query_locs = qe
        .queries
        .iter()
        .map(|q| {
            let (a, b, n) = loc_sum[q.as_str()];
            (a / n, b / n)
        })
        .collect();

    let n_nodes = catalog.len() + qe.queries.len();
    let bound = 1.0 / (config.d_n.max(1) as f64).sqrt();
    let mut rng = RngStreams::new(seed).stream("graph.node_emb");
    let emb: Vec<f64> = (0..n_nodes * config.d_n)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();

    let g = HeteroGraph {
        poi_ids: catalog.pois().iter().map(|p| p.poi_id.clone()).collect(),
        queries: qe.queries,
        query_locs,
        app,
        apq: qe.edges,
        node_emb: Tensor::new([n_nodes, config.d_n], emb)?,
        config: config.clone(),
        seed,
    };
    g.validate()?;
    Ok(g)
}

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datamodel::{Catalog, PoiRecord};
use crate::error::{Error, Result};
use crate::geocode::{LocationEncoder, LocationEncoderConfig, DEFAULT_PRECISION};
use crate::graphbuild::HeteroGraph;
use crate::hgl::{self, Hgl, HglConfig};
use crate::numerics::checkpoint::{load_params, save_params};
use crate::numerics::{dropout, BackwardState, ParamStore, RngStreams, Scalar, Tape, Tensor, Var};
use crate::textenc::{
    encode_pois, encode_queries, normalize_query, CharVocab, TextEncoder, TextEncoderConfig,
    TOP_QUERIES,
};

use super::{fuse_pairs, pair_scores, probability, PairLayout, PairScoring, RankerVars, B3, W3M, W3Q, W4, WV};

pub const MODEL_FORMAT: &str = "poigraph-model";

/// Which parts of the graph the model sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoPoiPoi,
    NoPoiQuery,
    NoGraph,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoPoiPoi,
        Variant::NoPoiQuery,
        Variant::NoGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPoiPoi => "no-poi-poi",
            Variant::NoPoiQuery => "no-poi-query",
            Variant::NoGraph => "no-graph",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Variant::NoGraph
    }

    fn edge_sets(self) -> (bool, bool) {
        match self {
            Variant::Full => (true, true),
            Variant::NoPoiPoi => (false, true),
            Variant::NoPoiQuery => (true, false),
            Variant::NoGraph => (false, false),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. The node width `d_n` comes from the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub d_c: usize,
    pub layer_widths: Vec<usize>,
    pub heads: usize,
    pub max_len: usize,
    pub geohash_precision: usize,
    pub backward_state: BackwardState,
    pub masked_softmax: bool,
    pub per_type_w1: bool,
    pub variant: Variant,
    pub pair_scoring: PairScoring,
    pub dropout: f64,
    pub vocab_min_freq: u64,
    /// Start the graph layers as the identity on the multi-source input:
    /// `W_2` of the first layer is `I` (when `d == d_n`), the other `W_2`
    /// and every `W_1` are zero.
    pub residual_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            d_c: 64,
            layer_widths: vec![128, 256],
            heads: 4,
            max_len: 30,
            geohash_precision: DEFAULT_PRECISION,
            backward_state: BackwardState::Terminal,
            masked_softmax: false,
            per_type_w1: false,
            variant: Variant::Full,
            pair_scoring: PairScoring::default(),
            dropout: 0.5,
            vocab_min_freq: 1,
            residual_init: true,
        }
    }
}

impl ModelConfig {
    pub fn text_config(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            d_c: self.d_c,
            d: self.d,
            max_len: self.max_len,
            backward_state: self.backward_state,
        }
    }

    pub fn geo_config(&self) -> LocationEncoderConfig {
        LocationEncoderConfig {
            precision: self.geohash_precision,
            d_c: self.d_c,
            d: self.d,
            backward_state: self.backward_state,
        }
    }

    pub fn hgl_config(&self, d_n: usize) -> HglConfig {
        HglConfig {
            layer_widths: self.layer_widths.clone(),
            heads: self.heads,
            d_n,
            d: self.d,
            masked_softmax: self.masked_softmax,
            per_type_w1: self.per_type_w1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layer_widths.is_empty() && self.variant.uses_graph() {
            return Err(Error::Config("graph variants need at least one layer".into()));
        }
        Ok(())
    }
}

/// Representation rows of a set of POIs: rows `offsets[j]..offsets[j + 1]`
/// of `m` belong to the `j`-th POI.
pub struct PoiBlock {
    pub m: Var,
    pub offsets: Vec<usize>,
}

/// Precomputed representation rows of every catalog POI.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringCache<T> {
    pub m: Tensor<T>,
    pub offsets: Vec<usize>,
}

/// Scores of `(query, POI)` pairs with the fused features behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPairs {
    /// Pre-sigmoid pair scores.
    pub scores: Vec<f64>,
    /// `[q̃; m]` per pair.
    pub features: Vec<Vec<f64>>,
}

impl ScoredPairs {
    pub fn probabilities(&self) -> Vec<f64> {
        self.scores.iter().map(|&s| probability(s)).collect()
    }
}

/// One ranked candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub poi_id: String,
    /// Class-1 probability.
    pub score: f64,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_vector: Option<Vec<f64>>,
}

/// One line of the learning-to-rank feature export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub query_id: String,
    pub poi_id: String,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl FeatureRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Encoders, graph layers and ranking head over one catalog.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub geo: LocationEncoder,
    pub catalog: Catalog,
    /// Graph as seen by the configured variant.
    pub graph: HeteroGraph,
    graph_digest: String,
    hgl: Option<Hgl>,
    /// Top query nodes of each POI, by weight.
    poi_queries: Vec<Vec<usize>>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        catalog: Catalog,
        graph: &HeteroGraph,
        vocab: CharVocab,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::skeleton(config, catalog, graph, vocab)?;
        model.params = model.init_params(seed)?;
        Ok(model)
    }

    fn skeleton(
        config: ModelConfig,
        catalog: Catalog,
        graph: &HeteroGraph,
        vocab: CharVocab,
    ) -> Result<Self> {
        config.validate()?;
        graph.validate()?;
        if graph.num_pois() != catalog.len()
            || graph.poi_ids.iter().zip(catalog.pois()).any(|(a, b)| a != &b.poi_id)
        {
            return Err(Error::GraphIntegrity(
                "graph POI nodes do not match the catalog".into(),
            ));
        }
        let (keep_app, keep_apq) = config.variant.edge_sets();
        let view = graph.restricted(keep_app, keep_apq);
        let hgl = if config.variant.uses_graph() {
            Some(Hgl::new(config.hgl_config(view.config.d_n), &view)?)
        } else {
            None
        };
        let poi_queries = view
            .poi_queries()
            .into_iter()
            .map(|row| row.into_iter().take(TOP_QUERIES).map(|(q, _)| q).collect())
            .collect();
        let text = TextEncoder::new(config.text_config(), vocab)?;
        let geo = LocationEncoder::new(config.geo_config())?;
        let dm = Self::rows_width(&config, &view);
        if config.pair_scoring == PairScoring::Dot && dm != config.d {
            return Err(Error::Config(format!(
                "dot scoring needs d_n == d (got d_n={dm}, d={})",
                config.d
            )));
        }
        Ok(Model {
            config,
            text,
            geo,
            catalog,
            graph_digest: graph.digest()?,
            graph: view,
            hgl,
            poi_queries,
            params: ParamStore::new(),
        })
    }

    fn rows_width(config: &ModelConfig, graph: &HeteroGraph) -> usize {
        if config.variant.uses_graph() {
            graph.config.d_n
        } else {
            config.d
        }
    }

    /// Width of the POI representation rows.
    pub fn d_m(&self) -> usize {
        Self::rows_width(&self.config, &self.graph)
    }

    /// Digest of the unrestricted graph the model was built on.
    pub fn graph_digest(&self) -> &str {
        &self.graph_digest
    }

    pub fn hgl(&self) -> Option<&Hgl> {
        self.hgl.as_ref()
    }

    fn init_params(&self, seed: u64) -> Result<ParamStore<T>> {
        let streams = RngStreams::new(seed);
        let mut store = ParamStore::new();
        self.text.init_params(&mut store, &mut streams.stream("init.text"))?;
        self.geo.init_params(&mut store, &mut streams.stream("init.geo"))?;
        if let Some(h) = &self.hgl {
            hgl::init_params(&h.config, &self.graph, &mut store, &mut streams.stream("init.hgl"))?;
            if self.config.residual_init {
                residual_init(&mut store, &h.config);
            }
        }
        let (d, dm) = (self.config.d, self.d_m());
        let dn = self.graph.config.d_n;
        let mut rng = streams.stream("init.rank");
        store.insert_uniform(W3Q, &[d, dn], d, &mut rng)?;
        store.insert_uniform(W3M, &[dm, dn], dm, &mut rng)?;
        store.insert_zeros(B3, &[dn])?;
        store.insert_uniform(W4, &[dn, 1], dn, &mut rng)?;
        store.insert_uniform(WV, &[d + dm, 2], d + dm, &mut rng)?;
        Ok(store)
    }

    pub fn ranker_vars(&self, tape: &mut Tape<T>) -> Result<RankerVars> {
        Ok(RankerVars {
            w3q: tape.param(&self.params, W3Q)?,
            w3m: tape.param(&self.params, W3M)?,
            b: tape.param(&self.params, B3)?,
            w4: tape.param(&self.params, W4)?,
            wv: tape.param(&self.params, WV)?,
        })
    }

    /// `q̃` for a batch of `(text, lat, lon)` queries.
    pub fn encode_queries(&self, tape: &mut Tape<T>, queries: &[(&str, f64, f64)]) -> Result<Var> {
        let (_, qt) = encode_queries(tape, &self.params, &self.text, &self.geo, queries)?;
        Ok(qt)
    }

    /// Representation rows of the given catalog positions: `[P̃_i, Q̃ of its
    /// top queries]` with a graph, `[P_i]` without.
    pub fn poi_block(&self, tape: &mut Tape<T>, pois: &[usize]) -> Result<PoiBlock> {
        if let Some(&bad) = pois.iter().find(|&&i| i >= self.catalog.len()) {
            return Err(Error::Lookup {
                kind: "catalog position",
                id: bad.to_string(),
            });
        }
        let records = self.catalog.pois();
        let Some(hgl) = &self.hgl else {
            let rows: Vec<&PoiRecord> = pois.iter().map(|&i| &records[i]).collect();
            let m = encode_pois(tape, &self.params, &self.text, &self.geo, &rows)?;
            return Ok(PoiBlock {
                m,
                offsets: (0..=pois.len()).collect(),
            });
        };
        let np = self.graph.num_pois();
        let mut targets = Vec::new();
        for &i in pois {
            targets.push(i);
            targets.extend(self.poi_queries[i].iter().map(|&q| np + q));
        }
        let plan = hgl.plan(&targets)?;
        let nprime = self.multi_source(tape, plan.sources())?;
        let out = hgl.forward(tape, &self.params, &plan, nprime, None)?;
        let last = plan.num_layers();
        let mut idx = Vec::with_capacity(targets.len());
        let mut offsets = vec![0];
        for &i in pois {
            idx.push(plan.position(last, i).expect("target"));
            for &q in &self.poi_queries[i] {
                idx.push(plan.position(last, np + q).expect("target"));
            }
            offsets.push(idx.len());
        }
        let m = tape.gather_rows(out, idx)?;
        Ok(PoiBlock { m, offsets })
    }

    /// Multi-source representations of graph nodes (sorted, POIs first).
    fn multi_source(&self, tape: &mut Tape<T>, nodes: &[usize]) -> Result<Var> {
        let np = self.graph.num_pois();
        let split = nodes.partition_point(|&n| n < np);
        let records = self.catalog.pois();
        let mut parts = Vec::new();
        if split > 0 {
            let rows: Vec<&PoiRecord> = nodes[..split].iter().map(|&i| &records[i]).collect();
            parts.push(encode_pois(tape, &self.params, &self.text, &self.geo, &rows)?);
        }
        if split < nodes.len() {
            let qs: Vec<(&str, f64, f64)> = nodes[split..]
                .iter()
                .map(|&n| {
                    let q = n - np;
                    let (lat, lon) = self.graph.query_locs[q];
                    (self.graph.queries[q].as_str(), lat, lon)
                })
                .collect();
            parts.push(self.encode_queries(tape, &qs)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// Scores every pair `(query row, block POI)` on the tape.
    pub fn score_block(
        &self,
        tape: &mut Tape<T>,
        q: Var,
        block: &PoiBlock,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let vars = self.ranker_vars(tape)?;
        let fused = fuse_pairs(
            tape,
            &vars,
            q,
            block.m,
            &PairLayout {
                pairs,
                offsets: &block.offsets,
            },
        )?;
        pair_scores(tape, self.config.pair_scoring, &vars, &fused)
    }

    /// Applies training-time dropout to `q̃` and the representation rows.
    pub fn apply_dropout(
        &self,
        tape: &mut Tape<T>,
        q: Var,
        block: PoiBlock,
        rng: &mut impl Rng,
    ) -> Result<(Var, PoiBlock)> {
        let rate = self.config.dropout;
        let q = dropout(tape, q, rate, true, rng)?;
        let m = dropout(tape, block.m, rate, true, rng)?;
        Ok((
            q,
            PoiBlock {
                m,
                offsets: block.offsets,
            },
        ))
    }

    /// Representation rows of the whole catalog, computed once.
    pub fn scoring_cache(&self) -> Result<ScoringCache<T>> {
        let mut tape = Tape::new();
        let all: Vec<usize> = (0..self.catalog.len()).collect();
        let block = self.poi_block(&mut tape, &all)?;
        Ok(ScoringCache {
            m: tape.value(block.m).clone(),
            offsets: block.offsets,
        })
    }

    /// Scores `(query index, catalog position)` pairs against a cache.
    pub fn score_pairs(
        &self,
        cache: &ScoringCache<T>,
        queries: &[(&str, f64, f64)],
        pairs: &[(usize, usize)],
        with_features: bool,
    ) -> Result<ScoredPairs> {
        if queries.is_empty() || pairs.is_empty() {
            return Ok(ScoredPairs {
                scores: vec![0.0; pairs.len()],
                features: Vec::new(),
            });
        }
        let mut tape = Tape::new();
        let q = self.encode_queries(&mut tape, queries)?;
        let m = tape.constant(cache.m.clone());
        let vars = self.ranker_vars(&mut tape)?;
        let fused = fuse_pairs(
            &mut tape,
            &vars,
            q,
            m,
            &PairLayout {
                pairs,
                offsets: &cache.offsets,
            },
        )?;
        let s = pair_scores(&mut tape, self.config.pair_scoring, &vars, &fused)?;
        let scores = tape.value(s).to_f64();
        let features = if with_features {
            let qv = tape.value(fused.q);
            let mv = tape.value(fused.m);
            (0..pairs.len())
                .map(|r| qv.row(r).iter().chain(mv.row(r)).map(|x| x.f64()).collect())
                .collect()
        } else {
            Vec::new()
        };
        Ok(ScoredPairs { scores, features })
    }

    /// Candidates ordered by descending score, ties by `poi_id`.
    pub fn rank(
        &self,
        cache: &ScoringCache<T>,
        query: &str,
        lat: f64,
        lon: f64,
        candidates: &[usize],
    ) -> Result<Vec<(usize, f64)>> {
        let pairs: Vec<(usize, usize)> = candidates.iter().map(|&c| (0, c)).collect();
        let scored = self.score_pairs(cache, &[(query, lat, lon)], &pairs, false)?;
        let mut out: Vec<(usize, f64)> = candidates.iter().copied().zip(scored.scores).collect();
        let pois = self.catalog.pois();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| pois[a.0].poi_id.cmp(&pois[b.0].poi_id)));
        Ok(out)
    }

    /// Ranks candidates given by id; unknown ids are a lookup error.
    pub fn rank_ids(
        &self,
        cache: &ScoringCache<T>,
        query: &str,
        lat: f64,
        lon: f64,
        candidates: &[String],
        with_features: bool,
    ) -> Result<Vec<ScoredCandidate>> {
        let pos = candidates
            .iter()
            .map(|id| self.catalog.require(id))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = pos.iter().map(|&c| (0, c)).collect();
        let scored = self.score_pairs(cache, &[(query, lat, lon)], &pairs, with_features)?;
        let mut order: Vec<usize> = (0..pos.len()).collect();
        order.sort_by(|&a, &b| {
            scored.scores[b]
                .total_cmp(&scored.scores[a])
                .then_with(|| candidates[a].cmp(&candidates[b]))
        });
        Ok(order
            .into_iter()
            .enumerate()
            .map(|(r, i)| ScoredCandidate {
                poi_id: candidates[i].clone(),
                score: probability(scored.scores[i]),
                rank: r + 1,
                feature_vector: with_features.then(|| scored.features[i].clone()),
            })
            .collect())
    }

    /// Feature records of one query against the given POIs, in input order.
    #[allow(clippy::too_many_arguments)]
    pub fn export_features(
        &self,
        cache: &ScoringCache<T>,
        query_id: &str,
        query: &str,
        lat: f64,
        lon: f64,
        poi_ids: &[String],
        with_features: bool,
    ) -> Result<Vec<FeatureRecord>> {
        let pos = poi_ids
            .iter()
            .map(|id| self.catalog.require(id))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = pos.iter().map(|&c| (0, c)).collect();
        let scored = self.score_pairs(cache, &[(query, lat, lon)], &pairs, with_features)?;
        Ok(poi_ids
            .iter()
            .enumerate()
            .map(|(i, id)| FeatureRecord {
                query_id: query_id.to_string(),
                poi_id: id.clone(),
                probability: probability(scored.scores[i]),
                features: with_features.then(|| scored.features[i].clone()),
            })
            .collect())
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = json!({
            "format": MODEL_FORMAT,
            "config": self.config,
            "vocab": self.text.vocab.entries(),
            "graph_digest": self.graph_digest,
            "extra": extra,
        });
        save_params(path, &self.params, meta)
    }

    /// Loads a checkpoint; the graph must be the one it was trained on.
    pub fn load(path: &Path, catalog: Catalog, graph: &HeteroGraph) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = load_params::<T>(path)?;
        if meta.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::load(path, "not a model checkpoint"));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let vocab = CharVocab::from_json(&meta["vocab"].to_string())?;
        let stored = meta["graph_digest"].as_str().unwrap_or_default();
        if stored != graph.digest()? {
            return Err(Error::GraphIntegrity(
                "checkpoint was trained on a different graph".into(),
            ));
        }
        let mut model = Self::skeleton(config, catalog, graph, vocab)?;
        let expected = model.init_params(0)?;
        for (name, p) in expected.iter() {
            match params.get(name) {
                Some(v) if v.shape() == p.value.shape() => {}
                Some(v) => {
                    return Err(Error::load(
                        path,
                        format!("`{name}` has shape {:?}, expected {:?}", v.shape(), p.value.shape()),
                    ))
                }
                None => return Err(Error::load(path, format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::load(path, "unexpected extra parameters"));
        }
        model.params = params;
        Ok((model, meta["extra"].clone()))
    }

    /// Normalized query text, as matched against graph query nodes.
    pub fn normalize(query: &str) -> String {
        normalize_query(query)
    }
}

fn residual_init<T: Scalar>(store: &mut ParamStore<T>, cfg: &HglConfig) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("hgl.l") && (n.contains(".w1") || n.ends_with(".w2")))
        .map(str::to_string)
        .collect();
    for name in names {
        let w = store.get_mut(&name).expect("listed");
        w.fill(T::zero());
        if name == "hgl.l0.w2" && cfg.d == cfg.d_n {
            for i in 0..cfg.d {
                w.row_mut(i)[i] = T::one();
            }
        }
    }
}

//! Graph attention layers over the POI/query graph.
//!
//! Each layer embeds every edge from its two endpoints, lets every node
//! attend over its incident edges of each type, and adds the fused edge
//! vector and the node's multi-source representation to its embedding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphbuild::HeteroGraph;
use crate::numerics::{ParamStore, Scalar, Segments, Tape, Tensor, Var};

pub const HGL_PREFIX: &str = "hgl";
pub const NODE_EMB: &str = "hgl.node_emb";

/// Edge types.
pub const EDGE_TYPES: [&str; 2] = ["pp", "pq"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HglConfig {
    /// Edge width `d_e` of each layer.
    pub layer_widths: Vec<usize>,
    pub heads: usize,
    pub d_n: usize,
    /// Width of the multi-source representations.
    pub d: usize,
    /// Exclude zero-weight edges from attention instead of scoring them 0.
    pub masked_softmax: bool,
    /// Separate `W_1` per edge type.
    pub per_type_w1: bool,
}

impl Default for HglConfig {
    fn default() -> Self {
        HglConfig {
            layer_widths: vec![128, 256],
            heads: 4,
            d_n: 128,
            d: 128,
            masked_softmax: false,
            per_type_w1: false,
        }
    }
}

impl HglConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_n == 0 || self.d == 0 || self.layer_widths.contains(&0) {
            return Err(Error::Config("graph layer sizes must be positive".into()));
        }
        Ok(())
    }
}

fn agg_name(k: usize) -> String {
    format!("{HGL_PREFIX}.l{k}.agg")
}

fn att_name(k: usize, r: usize, h: usize) -> String {
    format!("{HGL_PREFIX}.l{k}.att.{}.{h}", EDGE_TYPES[r])
}

fn w1_name(k: usize, r: Option<usize>) -> String {
    match r {
        Some(r) => format!("{HGL_PREFIX}.l{k}.w1.{}", EDGE_TYPES[r]),
        None => format!("{HGL_PREFIX}.l{k}.w1"),
    }
}

fn w2_name(k: usize) -> String {
    format!("{HGL_PREFIX}.l{k}.w2")
}

/// Registers all layer parameters and the node-embedding table taken from
/// the graph.
pub fn init_params<T: Scalar>(
    cfg: &HglConfig,
    graph: &HeteroGraph,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    if graph.config.d_n != cfg.d_n {
        return Err(Error::Config(format!(
            "graph embeddings have width {}, layers expect {}",
            graph.config.d_n, cfg.d_n
        )));
    }
    store.insert(NODE_EMB, graph.node_emb.cast())?;
    for (k, &de) in cfg.layer_widths.iter().enumerate() {
        store.insert_uniform(agg_name(k), &[cfg.d_n, de], cfg.d_n, rng)?;
        for r in 0..EDGE_TYPES.len() {
            for h in 0..cfg.heads {
                store.insert_uniform(att_name(k, r, h), &[de, cfg.d_n], de, rng)?;
            }
        }
        if cfg.per_type_w1 {
            for r in 0..EDGE_TYPES.len() {
                store.insert_uniform(w1_name(k, Some(r)), &[de, cfg.d_n], de, rng)?;
            }
        } else {
            store.insert_uniform(w1_name(k, None), &[de, cfg.d_n], de, rng)?;
        }
        store.insert_uniform(w2_name(k), &[cfg.d, cfg.d_n], cfg.d, rng)?;
    }
    Ok(())
}

/// Typed adjacency over node ids (POIs first, then queries).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphIndex {
    pub num_pois: usize,
    pub num_nodes: usize,
    /// Per type: `(u, v, weight)` in node ids.
    pub edges: [Vec<(usize, usize, f64)>; 2],
    /// Per type and node: `(edge, other endpoint)`, in edge order.
    pub incident: [Vec<Vec<(usize, usize)>>; 2],
}

impl GraphIndex {
    pub fn new(graph: &HeteroGraph, masked_softmax: bool) -> Result<Self> {
        let p = graph.num_pois();
        let n = graph.num_nodes();
        let keep = |w: f64| !(masked_softmax && w == 0.0);
        let pp: Vec<(usize, usize, f64)> =
            graph.app.iter().copied().filter(|e| keep(e.2)).collect();
        let pq: Vec<(usize, usize, f64)> = graph
            .apq
            .iter()
            .filter(|e| keep(e.2))
            .map(|&(a, q, w)| (a, p + q, w))
            .collect();
        let mut incident = [vec![Vec::new(); n], vec![Vec::new(); n]];
        for (r, list) in [&pp, &pq].into_iter().enumerate() {
            for (e, &(u, v, _)) in list.iter().enumerate() {
                if u >= n || v >= n || u == v {
                    return Err(Error::GraphIntegrity(format!("edge ({u}, {v}) is invalid")));
                }
                incident[r][u].push((e, v));
                incident[r][v].push((e, u));
            }
        }
        Ok(GraphIndex {
            num_pois: p,
            num_nodes: n,
            edges: [pp, pq],
            incident,
        })
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.incident
            .iter()
            .flat_map(move |inc| inc[node].iter().map(|&(_, o)| o))
    }

    /// Node sets needed to compute `targets` after `layers` layers:
    /// `levels[layers]` is the sorted target set and each lower level adds
    /// the neighbours of the one above.
    pub fn plan(&self, targets: &[usize], layers: usize) -> Result<Plan> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.num_nodes) {
            return Err(Error::GraphIntegrity(format!("node {bad} is not in the graph")));
        }
        let mut top: Vec<usize> = targets.to_vec();
        top.sort_unstable();
        top.dedup();
        let mut levels = vec![top];
        for _ in 0..layers {
            let above = levels.last().expect("non-empty");
            let mut mark = vec![false; self.num_nodes];
            for &u in above {
                mark[u] = true;
                for v in self.neighbors(u) {
                    mark[v] = true;
                }
            }
            levels.push((0..self.num_nodes).filter(|&i| mark[i]).collect());
        }
        levels.reverse();
        Ok(Plan::new(levels, self.num_nodes))
    }

    /// Every node at every level.
    pub fn full_plan(&self, layers: usize) -> Plan {
        let all: Vec<usize> = (0..self.num_nodes).collect();
        Plan::new(vec![all; layers + 1], self.num_nodes)
    }
}

/// Nested node sets, largest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub levels: Vec<Vec<usize>>,
    positions: Vec<Vec<usize>>,
}

impl Plan {
    fn new(levels: Vec<Vec<usize>>, num_nodes: usize) -> Self {
        let positions = levels
            .iter()
            .map(|lv| {
                let mut pos = vec![usize::MAX; num_nodes];
                for (i, &n) in lv.iter().enumerate() {
                    pos[n] = i;
                }
                pos
            })
            .collect();
        Plan { levels, positions }
    }

    pub fn num_layers(&self) -> usize {
        self.levels.len() - 1
    }

    /// Input node set.
    pub fn inputs(&self) -> &[usize] {
        &self.levels[0]
    }

    /// Nodes needing a multi-source representation.
    pub fn sources(&self) -> &[usize] {
        &self.levels[1.min(self.levels.len() - 1)]
    }

    pub fn targets(&self) -> &[usize] {
        self.levels.last().expect("non-empty")
    }

    /// Row of `node` in level `k`.
    pub fn position(&self, k: usize, node: usize) -> Option<usize> {
        let p = self.positions[k][node];
        (p != usize::MAX).then_some(p)
    }
}

/// `σ(max(h_u, h_v))` where `h = n W^(k)` has already been applied.
pub fn edge_embed<T: Scalar>(tape: &mut Tape<T>, hu: Var, hv: Var) -> Result<Var> {
    let m = tape.max(hu, hv)?;
    tape.sigmoid(m)
}

/// Incidences of one edge type grouped by target row.
struct Incidences {
    seg: Arc<Segments>,
    edge: Arc<Vec<usize>>,
    target: Arc<Vec<usize>>,
    weight: Vec<f64>,
}

/// Multi-head cross attention of target nodes over their incident edges;
/// returns one fused row per segment and the per-head coefficients.
fn fuse_incidences<T: Scalar>(
    tape: &mut Tape<T>,
    node_rows: Var,
    edges: Var,
    inc: &Incidences,
    heads: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let n_inc = tape.gather_rows(node_rows, Arc::clone(&inc.target))?;
    let e_inc = tape.gather_rows(edges, Arc::clone(&inc.edge))?;
    let weights = Tensor::new([inc.weight.len(), 1], inc.weight.iter().map(|&w| T::of(w)).collect())?;
    let mut fused = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for &w_r in heads {
        let proj = tape.matmul(edges, w_r)?;
        let proj = tape.tanh(proj)?;
        let proj = tape.gather_rows(proj, Arc::clone(&inc.edge))?;
        let s = tape.row_dot(n_inc, proj)?;
        let s = tape.mul_const(s, weights.clone())?;
        let a = tape.segment_softmax(s, &inc.seg)?;
        fused.push(tape.segment_weighted_sum(a, e_inc, &inc.seg)?);
        alphas.push(a);
    }
    let sum = tape.add_all(&fused)?;
    Ok((tape.scale(sum, T::of(1.0 / heads.len() as f64))?, alphas))
}

/// Fuses the `m` edge embeddings `e` (`m × d_e`) incident to one node `n`
/// (`1 × d_n`) with weights `a`; returns the fused `1 × d_e` row and each
/// head's coefficients.
pub fn fuse_edges<T: Scalar>(
    tape: &mut Tape<T>,
    n: Var,
    e: Var,
    a: &[f64],
    heads: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let m = tape.dims(e).0;
    if m == 0 || a.len() != m || heads.is_empty() {
        return Err(Error::dim("fuse_edges", "need at least one edge, one weight per edge and one head"));
    }
    let inc = Incidences {
        seg: Arc::new(Segments::from_lengths([m])),
        edge: Arc::new((0..m).collect()),
        target: Arc::new(vec![0; m]),
        weight: a.to_vec(),
    };
    fuse_incidences(tape, n, e, &inc, heads)
}

/// `n + ẽ W_1 + n' W_2`; `fused` is `None` for nodes without edges.
pub fn node_update<T: Scalar>(
    tape: &mut Tape<T>,
    n: Var,
    fused: Option<Var>,
    w1: Var,
    nprime: Var,
    w2: Var,
) -> Result<Var> {
    let src = tape.matmul(nprime, w2)?;
    let mut out = tape.add(n, src)?;
    if let Some(f) = fused {
        let msg = tape.matmul(f, w1)?;
        out = tape.add(out, msg)?;
    }
    Ok(out)
}

/// Attention coefficients recorded during a forward pass, for inspection.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// Per layer, edge type and head: coefficients with their segment layout.
    pub entries: Vec<(usize, usize, usize, Var, Arc<Segments>)>,
}

/// Graph layers bound to a typed adjacency.
#[derive(Clone, Debug)]
pub struct Hgl {
    pub config: HglConfig,
    pub index: GraphIndex,
}

impl Hgl {
    pub fn new(config: HglConfig, graph: &HeteroGraph) -> Result<Self> {
        config.validate()?;
        let index = GraphIndex::new(graph, config.masked_softmax)?;
        Ok(Hgl { config, index })
    }

    pub fn num_layers(&self) -> usize {
        self.config.layer_widths.len()
    }

    pub fn plan(&self, targets: &[usize]) -> Result<Plan> {
        self.index.plan(targets, self.num_layers())
    }

    pub fn full_plan(&self) -> Plan {
        self.index.full_plan(self.num_layers())
    }

    /// Runs every layer. `nprime` holds the multi-source representations of
    /// `plan.sources()` in order; the result has one row per target.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plan: &Plan,
        nprime: Var,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if plan.num_layers() != self.num_layers() {
            return Err(Error::dim("hgl", "plan depth does not match the layer count"));
        }
        if tape.dims(nprime) != (plan.sources().len(), self.config.d) {
            return Err(Error::dim(
                "hgl",
                format!(
                    "multi-source input is {:?}, expected ({}, {})",
                    tape.dims(nprime),
                    plan.sources().len(),
                    self.config.d
                ),
            ));
        }
        let mut trace = trace;
        let emb = tape.param(store, NODE_EMB)?;
        let mut x = tape.gather_rows(emb, plan.inputs().to_vec())?;
        for k in 0..self.num_layers() {
            x = self.layer(tape, store, plan, k, x, nprime, trace.as_deref_mut())?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plan: &Plan,
        k: usize,
        x: Var,
        nprime: Var,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let inputs = &plan.levels[k];
        let outputs = &plan.levels[k + 1];
        let in_pos = |n: usize| plan.position(k, n).expect("levels are nested");
        let out_rows: Vec<usize> = outputs.iter().map(|&n| in_pos(n)).collect();
        let out_rows = Arc::new(out_rows);
        debug_assert_eq!(tape.dims(x).0, inputs.len());

        let w_agg = tape.param(store, &agg_name(k))?;
        let h = tape.matmul(x, w_agg)?;
        let mut fused_terms = Vec::new();
        for r in 0..EDGE_TYPES.len() {
            let mut edge_ids: Vec<usize> = Vec::new();
            let mut edge_local = vec![usize::MAX; self.index.edges[r].len()];
            let mut seg_ids = Vec::new();
            let mut inc_edge = Vec::new();
            let mut inc_target = Vec::new();
            let mut weight = Vec::new();
            for (o, &node) in outputs.iter().enumerate() {
                for &(e, _) in &self.index.incident[r][node] {
                    if edge_local[e] == usize::MAX {
                        edge_local[e] = edge_ids.len();
                        edge_ids.push(e);
                    }
                    seg_ids.push(o);
                    inc_edge.push(edge_local[e]);
                    inc_target.push(out_rows[o]);
                    weight.push(self.index.edges[r][e].2);
                }
            }
            if edge_ids.is_empty() {
                continue;
            }
            let (us, vs): (Vec<usize>, Vec<usize>) = edge_ids
                .iter()
                .map(|&e| {
                    let (u, v, _) = self.index.edges[r][e];
                    (in_pos(u), in_pos(v))
                })
                .unzip();
            let hu = tape.gather_rows(h, us)?;
            let hv = tape.gather_rows(h, vs)?;
            let e = edge_embed(tape, hu, hv)?;
            let inc = Incidences {
                seg: Arc::new(Segments::from_sorted_ids(&seg_ids, outputs.len())?),
                edge: Arc::new(inc_edge),
                target: Arc::new(inc_target),
                weight,
            };
            let heads = (0..self.config.heads)
                .map(|hd| tape.param(store, &att_name(k, r, hd)))
                .collect::<Result<Vec<_>>>()?;
            let (fused, alphas) = fuse_incidences(tape, x, e, &inc, &heads)?;
            if let Some(t) = trace.as_deref_mut() {
                for (hd, a) in alphas.into_iter().enumerate() {
                    t.entries.push((k, r, hd, a, Arc::clone(&inc.seg)));
                }
            }
            let w1 = tape.param(
                store,
                &w1_name(k, self.config.per_type_w1.then_some(r)),
            )?;
            fused_terms.push(tape.matmul(fused, w1)?);
        }

        let n_out = tape.gather_rows(x, Arc::clone(&out_rows))?;
        let src_rows: Vec<usize> = outputs
            .iter()
            .map(|&n| plan.position(1, n).expect("levels are nested"))
            .collect();
        let np = tape.gather_rows(nprime, src_rows)?;
        let w2 = tape.param(store, &w2_name(k))?;
        let src = tape.matmul(np, w2)?;
        let mut out = tape.add(n_out, src)?;
        if !fused_terms.is_empty() {
            let msg = tape.add_all(&fused_terms)?;
            out = tape.add(out, msg)?;
        }
        Ok(out)
    }
}

/// Graph-refined POI and query representations.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeReps<T> {
    pub p_tilde: Tensor<T>,
    pub q_tilde: Tensor<T>,
}

/// Full-graph forward pass; `nprime` holds every node's multi-source
/// representation (POIs first).
pub fn run_graph<T: Scalar>(
    hgl: &Hgl,
    store: &ParamStore<T>,
    nprime: Tensor<T>,
) -> Result<NodeReps<T>> {
    let mut tape = Tape::new();
    let plan = hgl.full_plan();
    let np = tape.constant(nprime);
    let out = hgl.forward(&mut tape, store, &plan, np, None)?;
    let v = tape.value(out);
    let (n, d) = v.dims2();
    let p = hgl.index.num_pois;
    let data = v.data();
    Ok(NodeReps {
        p_tilde: Tensor::matrix(p, d, data[..p * d].to_vec())?,
        q_tilde: Tensor::matrix(n - p, d, data[p * d..].to_vec())?,
    })
}

//! Python bindings: text and location helpers, metrics, and a ranker
//! loaded from a trained run.

use std::collections::BTreeMap;
use std::path::Path;

use poigraph::config::RunConfig;
use poigraph::datamodel::ingest_catalog;
use poigraph::graphbuild::HeteroGraph;
use poigraph::numerics::{DType, Scalar};
use poigraph::ranker::{Model, ScoringCache};
use poigraph::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Load { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// NFKC, lowercase, collapsed whitespace.
#[pyfunction]
fn normalize_query(text: &str) -> String {
    poigraph::textenc::normalize_query(text)
}

#[pyfunction]
#[pyo3(signature = (lat, lon, precision = 6))]
fn geohash_encode(lat: f64, lon: f64, precision: usize) -> PyResult<String> {
    poigraph::geocode::geohash_encode(lat, lon, precision).map_err(to_py)
}

/// Character-overlap score of a query against a POI, in [0, 1].
#[pyfunction]
fn lexical_score(query: &str, name: &str, address: &str) -> f64 {
    poigraph::evalkit::lexical_score(query, name, address)
}

/// MRR, SR@k and nDCG@k from 1-based ranks of the clicked POI (`None`
/// when it was not among the candidates).
#[pyfunction]
#[pyo3(signature = (ranks, ks = vec![1, 3, 5]))]
fn metrics_from_ranks(ranks: Vec<Option<usize>>, ks: Vec<usize>) -> PyResult<BTreeMap<String, f64>> {
    poigraph::evalkit::metrics_from_ranks(&ranks, &ks).map_err(to_py)
}

struct Loaded<T: Scalar> {
    model: Model<T>,
    cache: ScoringCache<T>,
}

impl<T: Scalar> Loaded<T> {
    fn open(cfg: &RunConfig) -> poigraph::Result<Self> {
        let catalog = ingest_catalog(&cfg.paths.catalog)?;
        let graph = HeteroGraph::load(&cfg.paths.graph())?;
        let (model, _) = Model::<T>::load(&cfg.paths.checkpoint(), catalog, &graph)?;
        let cache = model.scoring_cache()?;
        Ok(Self { model, cache })
    }

    fn rank(&self, query: &str, lat: f64, lon: f64, candidates: Option<Vec<String>>) -> poigraph::Result<Vec<(String, f64)>> {
        let ids = candidates
            .unwrap_or_else(|| self.model.catalog.pois().iter().map(|p| p.poi_id.clone()).collect());
        let ranked = self.model.rank_ids(&self.cache, query, lat, lon, &ids, false)?;
        Ok(ranked.into_iter().map(|c| (c.poi_id, c.score)).collect())
    }
}

enum Precision {
    F32(Loaded<f32>),
    F64(Loaded<f64>),
}

/// A trained model with its catalog, ready to score queries.
#[pyclass(frozen)]
struct Ranker {
    inner: Precision,
}

#[pymethods]
impl Ranker {
    /// Opens the run described by a TOML config (paths resolve against the
    /// current directory, as on the command line).
    #[staticmethod]
    fn from_config(path: &str) -> PyResult<Self> {
        let cfg = RunConfig::load(Path::new(path)).map_err(to_py)?;
        let inner = match cfg.precision {
            DType::F32 => Precision::F32(Loaded::open(&cfg).map_err(to_py)?),
            DType::F64 => Precision::F64(Loaded::open(&cfg).map_err(to_py)?),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn num_pois(&self) -> usize {
        match &self.inner {
            Precision::F32(l) => l.model.catalog.pois().len(),
            Precision::F64(l) => l.model.catalog.pois().len(),
        }
    }

    /// `(poi_id, probability)` pairs, best first. Without `candidates` the
    /// whole catalog is ranked.
    #[pyo3(signature = (query, lat, lon, candidates = None, top = None))]
    fn rank(
        &self,
        py: Python<'_>,
        query: &str,
        lat: f64,
        lon: f64,
        candidates: Option<Vec<String>>,
        top: Option<usize>,
    ) -> PyResult<Vec<(String, f64)>> {
        let mut out = py
            .detach(|| match &self.inner {
                Precision::F32(l) => l.rank(query, lat, lon, candidates),
                Precision::F64(l) => l.rank(query, lat, lon, candidates),
            })
            .map_err(to_py)?;
        if let Some(n) = top {
            out.truncate(n);
        }
        Ok(out)
    }
}

#[pymodule]
fn poigraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_query, m)?)?;
    m.add_function(wrap_pyfunction!(geohash_encode, m)?)?;
    m.add_function(wrap_pyfunction!(lexical_score, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_ranks, m)?)?;
    m.add_class::<Ranker>()?;
    Ok(())
}

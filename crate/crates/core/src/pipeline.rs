//! Shared steps of the offline pipeline: loading, splitting, vocabulary
//! and the evaluation query sets.

use crate::config::{DataConfig, RunConfig};
use crate::datamodel::{
    ingest_catalog, ingest_logs, sessionize, split_sessions, Catalog, Dataset, SearchRecord, Split,
};
use crate::error::{Error, Result};
use crate::evalkit::{eval_queries, EvalQuery};
use crate::textenc::CharVocab;

/// Train, validation and test splits over one catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn catalog(&self) -> &Catalog {
        &self.train.catalog
    }
}

/// Sessionizes and splits records by session with `seed`.
pub fn split_records(
    catalog: Catalog,
    records: &[SearchRecord],
    data: &DataConfig,
    seed: u64,
) -> Result<Splits> {
    let sessions = sessionize(records, data.session_timeout_s);
    let (tr, va, te) = split_sessions(sessions, data.train_frac, data.valid_frac, seed);
    if tr.is_empty() {
        return Err(Error::EmptyCorpus("training split has no sessions"));
    }
    Ok(Splits {
        train: Dataset::new(catalog.clone(), tr, Split::Train)?,
        valid: Dataset::new(catalog.clone(), va, Split::Valid)?,
        test: Dataset::new(catalog, te, Split::Test)?,
    })
}

/// Reads the configured catalog and logs strictly and splits them.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let catalog = ingest_catalog(&cfg.paths.catalog)?;
    let records = ingest_logs(&cfg.paths.logs, Some(&catalog))?;
    split_records(catalog, &records, &cfg.data, cfg.seed)
}

/// Character vocabulary of the training split.
pub fn train_vocab(splits: &Splits, cfg: &RunConfig) -> Result<CharVocab> {
    CharVocab::from_dataset(&splits.train, cfg.model.vocab_min_freq, None)
}

/// Held-out queries of the test split.
pub fn test_queries(splits: &Splits, cfg: &RunConfig) -> Vec<EvalQuery> {
    eval_queries(&splits.test, cfg.data.prefilter_n)
}

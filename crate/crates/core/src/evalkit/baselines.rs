use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Catalog, PoiRecord};
use crate::error::Result;
use crate::numerics::{
    adam_step, dropout, AdamState, ParamStore, RngStreams, Scalar, StreamRng, Tape, Tensor,
};
use crate::ranker::{BatchPlanner, Example, LrSchedule, TrainConfig};
use crate::textenc::{normalize_query, CharVocab, TextEncoder, TextEncoderConfig};

fn grams(s: &str, n: usize) -> HashSet<String> {
    let chars: Vec<char> = normalize_query(s).chars().collect();
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Share of the query's character bigrams (unigrams for one-character
/// queries) found in `name address`, in `[0, 1]`.
pub fn lexical_score(query: &str, name: &str, address: &str) -> f64 {
    let n = if normalize_query(query).chars().count() == 1 { 1 } else { 2 };
    let q = grams(query, n);
    if q.is_empty() {
        return 0.0;
    }
    let doc = grams(&format!("{name} {address}"), n);
    q.intersection(&doc).count() as f64 / q.len() as f64
}

/// Literal-matching scores of each candidate.
pub fn lexical_baseline(query: &str, candidates: &[&PoiRecord]) -> Vec<f64> {
    candidates
        .iter()
        .map(|p| lexical_score(query, &p.name, &p.address))
        .collect()
}

/// Top `n` catalog POIs by lexical score, ties by `poi_id`.
pub fn lexical_prefilter(query: &str, catalog: &Catalog, n: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = catalog
        .pois()
        .iter()
        .map(|p| (lexical_score(query, &p.name, &p.address), p.poi_id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualEncoderConfig {
    pub text: TextEncoderConfig,
    pub dropout: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig {
            text: TextEncoderConfig::default(),
            dropout: 0.5,
        }
    }
}

/// Text-only two-tower stand-in: one character encoder embeds the query
/// and `name [SEP] address`, scored by dot product.
#[derive(Clone, Debug)]
pub struct DualEncoder<T: Scalar> {
    pub config: DualEncoderConfig,
    pub text: TextEncoder,
    pub catalog: Catalog,
    pub params: ParamStore<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(config: DualEncoderConfig, vocab: CharVocab, catalog: Catalog, seed: u64) -> Result<Self> {
        let text = TextEncoder::new(config.text.clone(), vocab)?;
        let mut params = ParamStore::new();
        text.init_params(&mut params, &mut RngStreams::new(seed).stream("init.dual"))?;
        Ok(DualEncoder {
            config,
            text,
            catalog,
            params,
        })
    }

    fn poi_seq(&self, i: usize) -> Vec<usize> {
        let p = &self.catalog.pois()[i];
        self.text.poi_symbols(&p.name, &p.address)
    }

    /// In-batch softmax training with the same batching and schedule as
    /// the main model. Returns the mean loss of each epoch.
    pub fn train(&mut self, examples: &[Example], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
        cfg.validate()?;
        let streams = RngStreams::new(seed);
        let per_epoch = (examples.len() / cfg.batch_size).max(1);
        let total = (per_epoch * cfg.epochs).max(1) as f64;
        let mut adam = AdamState::new(cfg.lr);
        let mut planner = BatchPlanner::new();
        let mut losses = Vec::new();
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut streams.substream("dual.shuffle", epoch as u64));
            let batches = planner.plan(examples, &order, cfg.batch_size);
            let mut sum = 0.0;
            for batch in &batches {
                adam.lr = match cfg.lr_schedule {
                    LrSchedule::Constant => cfg.lr,
                    LrSchedule::Linear => cfg.lr * (1.0 - step as f64 / total).max(0.0),
                };
                let mut rng = streams.substream("dual.dropout", step as u64);
                sum += self.step(examples, batch, &mut adam, &mut rng)?;
                step += 1;
            }
            losses.push(sum / batches.len().max(1) as f64);
        }
        Ok(losses)
    }

    fn step(
        &mut self,
        examples: &[Example],
        batch: &[usize],
        adam: &mut AdamState<T>,
        rng: &mut StreamRng,
    ) -> Result<f64> {
        let b = batch.len();
        let mut tape = Tape::new();
        let qs: Vec<Vec<usize>> = batch.iter().map(|&i| self.text.query_symbols(&examples[i].query)).collect();
        let ps: Vec<Vec<usize>> = batch.iter().map(|&i| self.poi_seq(examples[i].poi)).collect();
        let q = self.text.encode(&mut tape, &self.params, &qs)?;
        let p = self.text.encode(&mut tape, &self.params, &ps)?;
        let q = dropout(&mut tape, q, self.config.dropout, true, rng)?;
        let p = dropout(&mut tape, p, self.config.dropout, true, rng)?;
        let qi: Vec<usize> = (0..b).flat_map(|m| std::iter::repeat(m).take(b)).collect();
        let pi: Vec<usize> = (0..b).flat_map(|_| 0..b).collect();
        let qg = tape.gather_rows(q, qi)?;
        let pg = tape.gather_rows(p, pi)?;
        let s = tape.row_dot(qg, pg)?;
        let logits = tape.reshape(s, b, b)?;
        let targets: Vec<usize> = (0..b).collect();
        let loss = tape.cross_entropy(logits, &targets)?;
        let value = tape.value(loss).item().f64();
        let grads = tape.backward(loss)?;
        self.params.zero_grads();
        self.params.accumulate(&tape, &grads);
        adam_step(&mut self.params, adam)?;
        Ok(value)
    }

    /// Encodings of every catalog POI.
    pub fn poi_cache(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let seqs: Vec<Vec<usize>> = (0..self.catalog.len()).map(|i| self.poi_seq(i)).collect();
        let p = self.text.encode(&mut tape, &self.params, &seqs)?;
        Ok(tape.value(p).clone())
    }

    pub fn score(&self, cache: &Tensor<T>, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let q = self.text.encode(&mut tape, &self.params, &[self.text.query_symbols(query)])?;
        let q = tape.value(q).row(0).to_vec();
        candidates
            .iter()
            .map(|id| {
                let row = cache.row(self.catalog.require(id)?);
                Ok(q.iter().zip(row).map(|(a, b)| a.f64() * b.f64()).sum())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexical_contracts() {
        assert_eq!(lexical_score("kamori tower", "kamori tower", "1 main st"), 1.0);
        assert_eq!(lexical_score("xyz", "abc", "def"), 0.0);
        assert_eq!(lexical_score("", "abc", "def"), 0.0);
        assert_eq!(lexical_score("a", "abc", ""), 1.0);
        let s = lexical_score("kamori", "kamora", "");
        assert!(s > 0.0 && s < 1.0);
    }
}

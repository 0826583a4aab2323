use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Catalog, SearchRecord};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, RngStreams, Scalar, StreamRng, Tape, Var};

use super::model::Model;

/// A clicked search turned into a positive `(query, POI)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub query: String,
    pub lat: f64,
    pub lon: f64,
    /// Catalog position of the clicked POI.
    pub poi: usize,
}

impl Example {
    /// Positives of every clicked record; unknown POIs are an error.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a SearchRecord>,
        catalog: &Catalog,
    ) -> Result<Vec<Example>> {
        records
            .into_iter()
            .filter_map(|r| r.clicked_poi_id.as_deref().map(|id| (r, id)))
            .map(|(r, id)| {
                Ok(Example {
                    query: r.query_text.clone(),
                    lat: r.user_lat,
                    lon: r.user_lon,
                    poi: catalog.require(id)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the run.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 40,
            lr: 1e-3,
            lr_schedule: LrSchedule::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Groups examples into batches whose clicked POIs are pairwise distinct.
/// Examples that do not fit are deferred to the next epoch.
#[derive(Clone, Debug, Default)]
pub struct BatchPlanner {
    deferred: VecDeque<usize>,
}

impl BatchPlanner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn deferred(&self) -> usize {
        self.deferred.len()
    }

    /// Full batches from the deferred examples followed by `order`.
    pub fn plan(&mut self, examples: &[Example], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
        let mut pending: VecDeque<usize> = self.deferred.drain(..).chain(order.iter().copied()).collect();
        let mut batches = Vec::new();
        loop {
            let mut batch = Vec::with_capacity(batch_size);
            let mut seen = HashSet::with_capacity(batch_size);
            let mut skipped = VecDeque::new();
            while let Some(i) = pending.pop_front() {
                if seen.insert(examples[i].poi) {
                    batch.push(i);
                    if batch.len() == batch_size {
                        break;
                    }
                } else {
                    skipped.push_back(i);
                }
            }
            skipped.extend(pending.drain(..));
            pending = skipped;
            if batch.len() < batch_size {
                pending.extend(batch);
                break;
            }
            batches.push(batch);
        }
        self.deferred = pending;
        batches
    }
}

/// One epoch of batches in a fresh planner.
pub fn make_batches(examples: &[Example], order: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    check_distinct(examples, batch_size)?;
    Ok(BatchPlanner::new().plan(examples, order, batch_size))
}

fn check_distinct(examples: &[Example], batch_size: usize) -> Result<()> {
    let distinct: HashSet<usize> = examples.iter().map(|e| e.poi).collect();
    if distinct.len() < batch_size {
        return Err(Error::Data(format!(
            "{} distinct clicked POIs, fewer than the batch size {batch_size}",
            distinct.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// In-batch loss with its label counts.
pub struct BatchLoss {
    pub loss: Var,
    pub positives: usize,
    pub negatives: usize,
}

/// Every query of the batch is scored against every POI of the batch; the
/// softmax over each query's row is trained towards its own click, so the
/// other `B − 1` POIs act as negatives.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &[&Example],
    dropout_rng: Option<&mut StreamRng>,
) -> Result<BatchLoss> {
    let b = batch.len();
    let distinct: HashSet<usize> = batch.iter().map(|e| e.poi).collect();
    if distinct.len() != b {
        return Err(Error::Data("batch positives are not distinct".into()));
    }
    let queries: Vec<(&str, f64, f64)> = batch.iter().map(|e| (e.query.as_str(), e.lat, e.lon)).collect();
    let pois: Vec<usize> = batch.iter().map(|e| e.poi).collect();
    let mut q = model.encode_queries(tape, &queries)?;
    let mut block = model.poi_block(tape, &pois)?;
    if let Some(rng) = dropout_rng {
        (q, block) = model.apply_dropout(tape, q, block, rng)?;
    }
    let pairs: Vec<(usize, usize)> = (0..b).flat_map(|m| (0..b).map(move |n| (m, n))).collect();
    let s = model.score_block(tape, q, &block, &pairs)?;
    let logits = tape.reshape(s, b, b)?;
    let mut targets = Vec::with_capacity(b);
    let mut positives = 0;
    for e in batch {
        for (n, &p) in pois.iter().enumerate() {
            if e.poi == p {
                positives += 1;
                targets.push(n);
            }
        }
    }
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(BatchLoss {
        loss,
        positives,
        negatives: pairs.len() - positives,
    })
}

/// One Adam update on a batch with distinct positives.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    batch: &[&Example],
    dropout_rng: Option<&mut StreamRng>,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let bl = batch_loss(model, &mut tape, batch, dropout_rng)?;
    let value = tape.value(bl.loss).item().f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    let grads = tape.backward(bl.loss)?;
    model.params.zero_grads();
    model.params.accumulate(&tape, &grads);
    adam_step(&mut model.params, adam)?;
    Ok(StepReport {
        loss: value,
        positives: bl.positives,
        negatives: bl.negatives,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
}

/// Mini-batch training. `on_epoch` sees `(epoch, mean loss)` after each
/// epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    examples: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_distinct(examples, cfg.batch_size)?;
    let start = Instant::now();
    let streams = RngStreams::new(seed);
    let per_epoch = (examples.len() / cfg.batch_size).max(1);
    let total = (per_epoch * cfg.epochs).max(1) as f64;
    let mut adam = AdamState::new(cfg.lr);
    let mut planner = BatchPlanner::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut streams.substream("train.shuffle", epoch as u64));
        let batches = planner.plan(examples, &order, cfg.batch_size);
        let mut sum = 0.0;
        for batch in &batches {
            adam.lr = match cfg.lr_schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Linear => cfg.lr * (1.0 - steps as f64 / total).max(0.0),
            };
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let mut rng = streams.substream("train.dropout", steps as u64);
            sum += train_step(model, &mut adam, &refs, Some(&mut rng))?.loss;
            steps += 1;
        }
        let mean = sum / batches.len().max(1) as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}

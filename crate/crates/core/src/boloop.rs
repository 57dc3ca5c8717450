//! The optimization loop: periodic flow retraining, exact re-encoding, GP
//! fitting on the top records, trust regions around softmax-sampled anchors,
//! PMI-guided candidates and Thompson selection.

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::LatentSeq;
use crate::objectives::Oracle;
use crate::rng::{self, FlowRng};
use crate::seqflow::{FlowConfig, FlowModel, SeqFlow, SequenceCodec};
use crate::surrogate::{self, GpConfig, GpSummary, GpSurrogate};
use crate::tacs::{self, TacsConfig, TrustRegionState};
use crate::training::{self, TrainConfig};
use crate::vocab::{EmbeddingTable, TokenSequence};

/// Scalar loop settings (the `[run]` section of a config file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSettings {
    /// Oracle calls allowed after the initial design.
    pub budget: usize,
    pub n_init: usize,
    pub n_trust_regions: usize,
    pub queries_per_region: usize,
    pub n_cand: usize,
    /// Retrain the flow every this many batches (batch 0 always trains).
    pub retrain_every: usize,
    pub topk: usize,
    pub anchor_temperature: f64,
    /// Reuse the previous GP fit as the optimizer's starting point.
    pub gp_warm_start: bool,
    /// Stop early after this many consecutive batches without a new query.
    pub max_stalled_batches: usize,
    pub seed: u64,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self {
            budget: 2000,
            n_init: 100,
            n_trust_regions: 5,
            queries_per_region: 10,
            n_cand: 1000,
            retrain_every: 5,
            topk: 512,
            anchor_temperature: 0.1,
            gp_warm_start: true,
            max_stalled_batches: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: LoopSettings,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub gp: GpConfig,
    pub tacs: TacsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.n_init == 0 {
            return Err(Error::Config("run.n_init must be at least 1".into()));
        }
        for (name, v) in [
            ("n_trust_regions", r.n_trust_regions),
            ("queries_per_region", r.queries_per_region),
            ("n_cand", r.n_cand),
            ("retrain_every", r.retrain_every),
            ("max_stalled_batches", r.max_stalled_batches),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("run.{name} must be at least 1")));
            }
        }
        if r.topk < 2 {
            return Err(Error::Config("run.topk must be at least 2".into()));
        }
        if !(r.anchor_temperature.is_finite() && r.anchor_temperature > 0.0) {
            return Err(Error::Config("run.anchor_temperature must be positive".into()));
        }
        let space = (self.flow.vocab_size as f64 - 1.0).powi(self.flow.seq_len as i32);
        if r.n_init as f64 > space {
            return Err(Error::Config(format!(
                "run.n_init = {} exceeds the {space} PAD-free sequences",
                r.n_init
            )));
        }
        self.flow.validate()?;
        self.train.validate()?;
        self.gp.validate()?;
        self.tacs.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub x: TokenSequence,
    pub z: LatentSeq,
    pub y: f64,
    /// Batch that produced the record, `None` for the initial design.
    pub iteration: Option<usize>,
}

/// Evaluated sequences, with an exact-match cache over `x`.
#[derive(Clone, Debug, Default)]
pub struct EvaluatedDataset {
    records: Vec<Record>,
    index: HashMap<TokenSequence, usize>,
    best: Option<usize>,
}

impl EvaluatedDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn lookup(&self, x: &TokenSequence) -> Option<f64> {
        self.index.get(x).map(|&i| self.records[i].y)
    }

    pub fn contains(&self, x: &TokenSequence) -> bool {
        self.index.contains_key(x)
    }

    /// Appends a record. Fails if `x` is already present.
    pub fn insert(&mut self, record: Record) -> Result<usize> {
        if self.index.contains_key(&record.x) {
            return Err(Error::Config(format!("duplicate record for {}", record.x)));
        }
        let i = self.records.len();
        if self.best.is_none_or(|b| record.y > self.records[b].y) {
            self.best = Some(i);
        }
        self.index.insert(record.x.clone(), i);
        self.records.push(record);
        Ok(i)
    }

    pub fn best(&self) -> Option<&Record> {
        self.best.map(|i| &self.records[i])
    }

    pub fn best_y(&self) -> f64 {
        self.best().map_or(f64::NEG_INFINITY, |r| r.y)
    }

    /// Indices of the `k` highest-valued records, ties broken by age.
    pub fn topk_indices(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.sort_by(|&a, &b| self.records[b].y.total_cmp(&self.records[a].y).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    /// Recomputes every stored latent under a new codec.
    pub fn reencode<C: SequenceCodec>(&mut self, codec: &C) -> Result<()> {
        for r in &mut self.records {
            r.z = codec.encode(&r.x)?;
        }
        Ok(())
    }
}

/// `softmax(y/τ′)` with max subtraction.
pub fn anchor_probabilities(ys: &[f64], tau_prime: f64) -> Vec<f64> {
    let max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = ys.iter().map(|y| ((y - max) / tau_prime).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// `n` record indices drawn with replacement from the anchor softmax.
pub fn select_anchors<R: Rng + ?Sized>(
    dataset: &EvaluatedDataset,
    n: usize,
    tau_prime: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let ys: Vec<f64> = dataset.records.iter().map(|r| r.y).collect();
    let probs = anchor_probabilities(&ys, tau_prime);
    Ok((0..n).map(|_| sample_index(&probs, rng)).collect())
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Fraction of records whose round-tripped sequence scores differently.
/// Exact reconstruction short-cuts the oracle call.
pub fn value_discrepancy_ratio<C: SequenceCodec, O: Oracle + ?Sized>(
    codec: &C,
    dataset: &EvaluatedDataset,
    oracle: &mut O,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut bad = 0usize;
    for r in &dataset.records {
        let x_hat = codec.decode(&codec.encode(&r.x)?)?;
        if x_hat != r.x && oracle.evaluate(&x_hat)? != r.y {
            bad += 1;
        }
    }
    Ok(bad as f64 / dataset.len() as f64)
}

/// Distinct decoded sequences over candidate count.
pub fn distinct_ratio<C: SequenceCodec>(candidates: &[LatentSeq], codec: &C) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut seen = HashSet::new();
    for z in candidates {
        seen.insert(codec.decode(z)?);
    }
    Ok(seen.len() as f64 / candidates.len() as f64)
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_index: usize,
    pub tokens: Vec<usize>,
    pub y: f64,
    pub best_y: f64,
    pub batch: Option<usize>,
    pub region_id: Option<usize>,
    pub tr_length: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: usize,
    pub anchor_index: usize,
    pub anchor_y: f64,
    pub length: f64,
    pub n_candidates: usize,
    /// Decoded-distinct ratio among this region's candidates.
    pub distinct_ratio: f64,
    /// Distinct decoded sequences not already in the dataset.
    pub n_novel: usize,
    pub n_evaluated: usize,
    pub batch_best: Option<f64>,
    pub improved: bool,
    pub restart: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub retrained: bool,
    pub train_loss: Option<f64>,
    /// Measured right after re-encoding; zero for an exact codec.
    pub value_discrepancy: Option<f64>,
    pub gp: GpSummary,
    pub regions: Vec<RegionRecord>,
    pub best_y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    Stalled,
    Aborted,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub calls: Vec<CallRecord>,
    pub batches: Vec<BatchRecord>,
    pub dataset: EvaluatedDataset,
    pub model: FlowModel,
    pub table: EmbeddingTable,
    pub stop_reason: StopReason,
    /// Error that ended the run early, if any.
    pub abort: Option<String>,
}

impl RunResult {
    /// Best value after each oracle call.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.calls.iter().map(|c| c.best_y).collect()
    }

    pub fn best_y(&self) -> f64 {
        self.dataset.best_y()
    }
}

/// Summary of a baseline run.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub calls: Vec<CallRecord>,
    pub best_y: f64,
}

impl BaselineResult {
    pub fn best_so_far(&self) -> Vec<f64> {
        self.calls.iter().map(|c| c.best_y).collect()
    }
}

/// Uniform tokens from `1..vocab_size` at every position.
pub fn random_sequence<R: Rng + ?Sized>(vocab_size: usize, seq_len: usize, rng: &mut R) -> TokenSequence {
    TokenSequence::new((0..seq_len).map(|_| rng.random_range(1..vocab_size)).collect())
}

/// Draws up to `n` distinct PAD-free sequences not yet in `seen`.
pub fn draw_distinct<R: Rng + ?Sized>(
    n: usize,
    vocab_size: usize,
    seq_len: usize,
    seen: &HashSet<TokenSequence>,
    rng: &mut R,
) -> Vec<TokenSequence> {
    let mut out = Vec::with_capacity(n);
    let mut local = HashSet::new();
    let mut tries = 0usize;
    while out.len() < n && tries < 1000 * n.max(1) {
        tries += 1;
        let x = random_sequence(vocab_size, seq_len, rng);
        if !seen.contains(&x) && local.insert(x.clone()) {
            out.push(x);
        }
    }
    out
}

/// Uniform random search over PAD-free sequences, never repeating a query.
pub fn random_search<O: Oracle + ?Sized>(
    n_calls: usize,
    vocab_size: usize,
    seq_len: usize,
    seed: u64,
    oracle: &mut O,
) -> Result<BaselineResult> {
    let mut rng = rng::seeded(seed);
    let xs = draw_distinct(n_calls, vocab_size, seq_len, &HashSet::new(), &mut rng);
    let mut best = f64::NEG_INFINITY;
    let mut calls = Vec::with_capacity(xs.len());
    for (i, x) in xs.into_iter().enumerate() {
        let y = oracle.evaluate(&x)?;
        best = best.max(y);
        calls.push(CallRecord {
            call_index: i,
            tokens: x.0,
            y,
            best_y: best,
            batch: None,
            region_id: None,
            tr_length: None,
        });
    }
    Ok(BaselineResult { calls, best_y: best })
}

// Stream ids for the seed tree of a run.
const S_EMBED: u64 = 1;
const S_FLOW: u64 = 2;
const S_INIT: u64 = 3;
const S_TRAIN: u64 = 1 << 20;
const S_GP: u64 = 2 << 20;
const S_BATCH: u64 = 3 << 20;

struct Region {
    state: TrustRegionState,
    anchor: usize,
}

struct Loop<'o, O: Oracle + ?Sized> {
    cfg: RunConfig,
    oracle: &'o mut O,
    model: FlowModel,
    table: EmbeddingTable,
    dataset: EvaluatedDataset,
    calls: Vec<CallRecord>,
    batches: Vec<BatchRecord>,
    regions: Vec<Option<Region>>,
    gp: Option<GpSurrogate>,
    trained_upto: usize,
}

impl<O: Oracle + ?Sized> Loop<'_, O> {
    fn evaluate(&mut self, x: TokenSequence, batch: Option<usize>, region: Option<(usize, f64)>) -> Result<f64> {
        let y = self.oracle.evaluate(&x)?;
        if !y.is_finite() {
            return Err(Error::Oracle(format!("non-finite value {y} for {x}")));
        }
        let z = SeqFlow::new(&self.model, &self.table).encode(&x)?;
        self.dataset.insert(Record {
            x: x.clone(),
            z,
            y,
            iteration: batch,
        })?;
        self.calls.push(CallRecord {
            call_index: self.calls.len(),
            tokens: x.0,
            y,
            best_y: self.dataset.best_y(),
            batch,
            region_id: region.map(|r| r.0),
            tr_length: region.map(|r| r.1),
        });
        Ok(y)
    }

    fn init(&mut self) -> Result<()> {
        let f = &self.cfg.flow;
        let mut rng = rng::substream(self.cfg.run.seed, S_INIT);
        for x in draw_distinct(self.cfg.run.n_init, f.vocab_size, f.seq_len, &HashSet::new(), &mut rng) {
            self.evaluate(x, None, None)?;
        }
        Ok(())
    }

    /// Trains on the top records plus everything since the last retrain,
    /// then re-encodes the whole dataset.
    fn retrain(&mut self, batch: usize) -> Result<(f64, f64)> {
        let mut idx: Vec<usize> = self.dataset.topk_indices(self.cfg.run.topk);
        idx.extend(self.trained_upto..self.dataset.len());
        idx.sort_unstable();
        idx.dedup();
        let corpus: Vec<TokenSequence> = idx.iter().map(|&i| self.dataset.records[i].x.clone()).collect();
        let train = TrainConfig {
            seed: rng::derive_seed(self.cfg.run.seed, S_TRAIN + batch as u64),
            track_reconstruction: false,
            ..self.cfg.train.clone()
        };
        let loss = if train.epochs == 0 {
            f64::NAN
        } else {
            let out = training::fit_flow(&corpus, &self.model, &self.table, &train)?;
            self.model = out.model;
            self.table = out.table;
            out.history.last().map_or(f64::NAN, |h| h.total)
        };
        self.trained_upto = self.dataset.len();
        self.dataset.reencode(&SeqFlow::new(&self.model, &self.table))?;
        for region in self.regions.iter_mut().flatten() {
            region.state.anchor_z = self.dataset.records[region.anchor].z.clone();
        }
        let codec = SeqFlow::new(&self.model, &self.table);
        let mut mismatched = 0usize;
        for r in &self.dataset.records {
            if codec.decode(&r.z)? != r.x {
                mismatched += 1;
            }
        }
        Ok((loss, mismatched as f64 / self.dataset.len() as f64))
    }

    fn fit_surrogate(&mut self, batch: usize) -> Result<()> {
        let idx = self.dataset.topk_indices(self.cfg.run.topk);
        let zs: Vec<LatentSeq> = idx.iter().map(|&i| self.dataset.records[i].z.clone()).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| self.dataset.records[i].y).collect();
        let gp_cfg = GpConfig {
            seed: rng::derive_seed(self.cfg.run.seed, S_GP + batch as u64),
            ..self.cfg.gp.clone()
        };
        let warm = if self.cfg.run.gp_warm_start { self.gp.as_ref() } else { None };
        self.gp = Some(surrogate::fit_gp_from(&zs, &ys, &gp_cfg, warm)?);
        Ok(())
    }

    fn new_region(&self, rng: &mut FlowRng) -> Result<Region> {
        let anchor = select_anchors(&self.dataset, 1, self.cfg.run.anchor_temperature, rng)?[0];
        let r = &self.dataset.records[anchor];
        Ok(Region {
            state: TrustRegionState::new(r.z.clone(), r.y, &self.cfg.tacs.trust_region),
            anchor,
        })
    }

    fn remaining(&self) -> usize {
        (self.cfg.run.n_init + self.cfg.run.budget).saturating_sub(self.calls.len())
    }

    /// Runs one batch; returns the number of oracle calls made.
    fn batch(&mut self, batch: usize) -> Result<usize> {
        let run = self.cfg.run.clone();
        let (mut retrained, mut train_loss, mut discrepancy) = (false, None, None);
        if batch.is_multiple_of(run.retrain_every) {
            let (loss, ratio) = self.retrain(batch)?;
            retrained = true;
            train_loss = loss.is_finite().then_some(loss);
            discrepancy = Some(ratio);
        }
        self.fit_surrogate(batch)?;
        let mut rng = rng::substream(run.seed, S_BATCH + batch as u64);
        let mut pending: HashSet<TokenSequence> = HashSet::new();
        let mut region_logs = Vec::with_capacity(run.n_trust_regions);
        let mut made = 0usize;
        for rid in 0..run.n_trust_regions {
            if self.regions[rid].is_none() {
                self.regions[rid] = Some(self.new_region(&mut rng)?);
            }
            let region = self.regions[rid].as_ref().expect("region initialized");
            let anchor_x = self.dataset.records[region.anchor].x.clone();
            let tr = region.state.clone();
            let importance = tacs::token_importance(&tr.anchor_z, &anchor_x, &self.model, &self.table, &self.cfg.tacs, &mut rng)?;
            let cands = tacs::sample_candidates(&tr, &importance.probs, run.n_cand, &mut rng)?;
            let codec = SeqFlow::new(&self.model, &self.table);
            let mut group_of: HashMap<TokenSequence, usize> = HashMap::new();
            let mut decoded_distinct = HashSet::new();
            let mut keep = Vec::new();
            let mut groups = Vec::new();
            let mut group_seq = Vec::new();
            for (ci, z) in cands.iter().enumerate() {
                let x = codec.decode(z)?;
                decoded_distinct.insert(x.clone());
                if self.dataset.contains(&x) || pending.contains(&x) {
                    continue;
                }
                let next = group_of.len();
                let g = *group_of.entry(x.clone()).or_insert(next);
                if g == next {
                    group_seq.push(x);
                }
                keep.push(ci);
                groups.push(g);
            }
            let q = run.queries_per_region.min(self.remaining());
            let mut batch_best: Option<f64> = None;
            let mut best_new: Option<usize> = None;
            let mut n_evaluated = 0;
            if q > 0 && !keep.is_empty() {
                let flat = DMatrix::from_fn(keep.len(), cands[0].as_slice().len(), |i, j| cands[keep[i]].as_slice()[j]);
                let gp = self.gp.as_ref().expect("surrogate fitted");
                let chosen = surrogate::thompson_select_grouped(gp, &flat, &groups, q, &mut rng)?;
                for ci in chosen.indices {
                    let x = group_seq[groups[ci]].clone();
                    pending.insert(x.clone());
                    let y = self.evaluate(x, Some(batch), Some((rid, tr.length)))?;
                    n_evaluated += 1;
                    if batch_best.is_none_or(|b| y > b) {
                        batch_best = Some(y);
                        best_new = Some(self.dataset.len() - 1);
                    }
                }
            }
            made += n_evaluated;
            let update = tacs::update_trust_region(&tr, batch_best.unwrap_or(f64::NEG_INFINITY));
            let region = self.regions[rid].as_mut().expect("region initialized");
            region.state = update.state;
            if update.improved {
                let i = best_new.expect("improvement implies an evaluation");
                let r = &self.dataset.records[i];
                region.state.recenter(r.z.clone(), r.y);
                region.anchor = i;
            }
            region_logs.push(RegionRecord {
                region_id: rid,
                anchor_index: region.anchor,
                anchor_y: tr.anchor_y,
                length: tr.length,
                n_candidates: cands.len(),
                distinct_ratio: decoded_distinct.len() as f64 / cands.len() as f64,
                n_novel: group_seq.len(),
                n_evaluated,
                batch_best,
                improved: update.improved,
                restart: update.restart,
            });
            if update.restart {
                self.regions[rid] = None;
            }
        }
        self.batches.push(BatchRecord {
            batch,
            retrained,
            train_loss,
            value_discrepancy: discrepancy,
            gp: self.gp.as_ref().expect("surrogate fitted").summary(),
            regions: region_logs,
            best_y: self.dataset.best_y(),
        });
        Ok(made)
    }
}

/// The untrained flow and embedding table a run with `seed` starts from.
pub fn initial_codec(flow: &FlowConfig, seed: u64) -> Result<(FlowModel, EmbeddingTable)> {
    let table = EmbeddingTable::build(flow.vocab_size, flow.embed_dim, rng::derive_seed(seed, S_EMBED))?;
    let model = FlowModel::new(flow.clone(), &mut rng::substream(seed, S_FLOW))?;
    Ok((model, table))
}

/// Runs the full loop against `oracle`. Configuration problems are returned
/// as errors; failures after the first oracle call end the run early and
/// are reported in [`RunResult::abort`] with everything gathered so far.
pub fn run_bo<O: Oracle + ?Sized>(config: &RunConfig, oracle: &mut O) -> Result<RunResult> {
    config.validate()?;
    let (model, table) = initial_codec(&config.flow, config.run.seed)?;
    let mut lp = Loop {
        cfg: config.clone(),
        oracle,
        model,
        table,
        dataset: EvaluatedDataset::new(),
        calls: Vec::new(),
        batches: Vec::new(),
        regions: (0..config.run.n_trust_regions).map(|_| None).collect(),
        gp: None,
        trained_upto: 0,
    };
    let outcome = (|| -> Result<StopReason> {
        lp.init()?;
        let mut stalled = 0usize;
        let mut batch = 0usize;
        while lp.remaining() > 0 {
            if lp.dataset.len() < 2 {
                return Ok(StopReason::Stalled);
            }
            if lp.batch(batch)? == 0 {
                stalled += 1;
                if stalled >= lp.cfg.run.max_stalled_batches {
                    return Ok(StopReason::Stalled);
                }
            } else {
                stalled = 0;
            }
            batch += 1;
        }
        Ok(StopReason::BudgetExhausted)
    })();
    let (stop_reason, abort) = match outcome {
        Ok(r) => (r, None),
        Err(e) => (StopReason::Aborted, Some(e.to_string())),
    };
    Ok(RunResult {
        calls: lp.calls,
        batches: lp.batches,
        dataset: lp.dataset,
        model: lp.model,
        table: lp.table,
        stop_reason,
        abort,
    })
}

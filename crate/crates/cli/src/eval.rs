use std::path::PathBuf;

use flowbo::boloop::{self, EvaluatedDataset, Record};
use flowbo::config::ExperimentConfig;
use flowbo::objectives::{make_objective, Oracle};
use flowbo::rng::{self, FlowRng};
use flowbo::seqflow::{SeqFlow, SequenceCodec};
use flowbo::tacs::{self, TrustRegionState};
use flowbo::TokenSequence;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::output::{self, Log};
use crate::{setup, Common, EvalKind, Failure};

pub const DISCREPANCY: &str = "discrepancy.json";
pub const DISTINCT: &str = "distinct.csv";
pub const DISTINCT_SUMMARY: &str = "distinct_summary.json";
pub const PMI: &str = "pmi.csv";

pub fn run(what: EvalKind, common: &Common, checkpoint: Option<PathBuf>, log: &Log) -> Result<(), Failure> {
    let cfg = setup::load(common)?;
    let dir = checkpoint.or_else(|| cfg.eval.checkpoint.clone()).ok_or_else(|| {
        anyhow::Error::from(flowbo::Error::Config(
            "eval needs --checkpoint or eval.checkpoint".into(),
        ))
    })?;
    let (model, table) = setup::load_checkpoint(&dir)?;
    let mut cfg = cfg;
    // The checkpoint defines the sequence space.
    cfg.flow = model.config().clone();
    let codec = SeqFlow::new(&model, &table);
    match what {
        EvalKind::Discrepancy => discrepancy(&cfg, &codec, common, log),
        EvalKind::Distinct => distinct(&cfg, &codec, common, log),
        EvalKind::Pmi => pmi(&cfg, &codec, common, log),
    }
}

/// Corpus sequences if configured, otherwise `n` random PAD-free ones.
fn sequences(cfg: &ExperimentConfig, n: usize, rng: &mut FlowRng) -> anyhow::Result<Vec<TokenSequence>> {
    Ok(match setup::corpus(cfg)? {
        Some(c) => c,
        None => boloop::draw_distinct(n, cfg.flow.vocab_size, cfg.flow.seq_len, &Default::default(), rng),
    })
}

fn anchors(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Vec<TokenSequence>> {
    let mut rng = rng::substream(seed, 1);
    let mut pool = sequences(cfg, cfg.eval.anchors, &mut rng)?;
    pool.shuffle(&mut rng);
    pool.truncate(cfg.eval.anchors);
    Ok(pool)
}

#[derive(Serialize)]
struct DiscrepancyReport {
    n_records: usize,
    exact_reconstructions: usize,
    value_discrepancy_ratio: f64,
}

fn discrepancy(cfg: &ExperimentConfig, codec: &SeqFlow<'_>, common: &Common, log: &Log) -> Result<(), Failure> {
    let mut objective = make_objective(&cfg.objective, cfg.flow.vocab_size, cfg.flow.seq_len)?;
    let mut rng = rng::substream(cfg.run.seed, 2);
    let xs = sequences(cfg, cfg.eval.n_records, &mut rng)?;
    let mut ds = EvaluatedDataset::new();
    let mut exact = 0usize;
    for x in xs {
        if ds.contains(&x) {
            continue;
        }
        let z = codec.encode(&x)?;
        if codec.decode(&z)? == x {
            exact += 1;
        }
        let y = objective.evaluate(&x)?;
        ds.insert(Record { x, z, y, iteration: None })?;
    }
    let ratio = boloop::value_discrepancy_ratio(codec, &ds, &mut objective)?;
    log.info(format!("value discrepancy ratio {ratio} over {} records", ds.len()));
    output::write_json(
        &common.output_dir.join(DISCREPANCY),
        &DiscrepancyReport {
            n_records: ds.len(),
            exact_reconstructions: exact,
            value_discrepancy_ratio: ratio,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct DistinctSummary {
    temperature: f64,
    mean_tacs: f64,
    mean_uniform: f64,
}

fn distinct(cfg: &ExperimentConfig, codec: &SeqFlow<'_>, common: &Common, log: &Log) -> Result<(), Failure> {
    let e = &cfg.eval;
    let l = cfg.flow.seq_len;
    let kappa = cfg.tacs.kappa_for(l);
    let uniform = tacs::uniform_probs(l, kappa);
    let mut rows = Vec::new();
    let mut means = vec![(0.0, 0.0); e.temperatures.len()];
    for s in 0..e.seeds {
        let seed = rng::derive_seed(cfg.run.seed, 100 + s as u64);
        let xs = anchors(cfg, seed)?;
        let mut pmi_rng = rng::substream(seed, 2);
        let mut regions = Vec::with_capacity(xs.len());
        for x in &xs {
            let z = codec.encode(x)?;
            let omega = tacs::pmi_scores(&z, x, codec.model, codec.table, cfg.tacs.n_mc, cfg.tacs.epsilon, &mut pmi_rng)?;
            regions.push((TrustRegionState::new(z, 0.0, &cfg.tacs.trust_region), omega));
        }
        for (ti, &tau) in e.temperatures.iter().enumerate() {
            for (mi, mode) in ["tacs", "uniform"].into_iter().enumerate() {
                // Both modes share a stream so the comparison is paired.
                let mut rng = rng::substream(seed, 10 + ti as u64);
                let mut total = 0.0;
                for (tr, omega) in &regions {
                    let probs = if mi == 0 { tacs::tacs_probs(omega, tau, kappa) } else { uniform.clone() };
                    let cands = tacs::sample_candidates(tr, &probs, e.n_cand, &mut rng)?;
                    total += boloop::distinct_ratio(&cands, codec)?;
                }
                let ratio = total / regions.len() as f64;
                if mi == 0 {
                    means[ti].0 += ratio / e.seeds as f64;
                } else {
                    means[ti].1 += ratio / e.seeds as f64;
                }
                rows.push(format!("{tau},{mode},{s},{ratio}"));
            }
        }
        log.debug(format!("seed {s} done"));
    }
    let dir = &common.output_dir;
    output::write_csv(&dir.join(DISTINCT), "temperature,mode,seed,distinct_ratio", rows)?;
    let summary: Vec<DistinctSummary> = e
        .temperatures
        .iter()
        .zip(&means)
        .map(|(&temperature, &(mean_tacs, mean_uniform))| DistinctSummary {
            temperature,
            mean_tacs,
            mean_uniform,
        })
        .collect();
    for s in &summary {
        log.info(format!(
            "tau {}: tacs {:.4} uniform {:.4}",
            s.temperature, s.mean_tacs, s.mean_uniform
        ));
    }
    output::write_json(&dir.join(DISTINCT_SUMMARY), &summary)?;
    Ok(())
}

fn pmi(cfg: &ExperimentConfig, codec: &SeqFlow<'_>, common: &Common, log: &Log) -> Result<(), Failure> {
    let xs = anchors(cfg, cfg.run.seed)?;
    let l = cfg.flow.seq_len;
    let mut rng = rng::substream(cfg.run.seed, 3);
    let mut sums = vec![0.0; l];
    for x in &xs {
        let z = codec.encode(x)?;
        let omega = tacs::pmi_scores(&z, x, codec.model, codec.table, cfg.tacs.n_mc, cfg.tacs.epsilon, &mut rng)?;
        for (s, w) in sums.iter_mut().zip(omega) {
            *s += w;
        }
    }
    let n = xs.len() as f64;
    log.info(format!("PMI averaged over {} anchors", xs.len()));
    output::write_csv(
        &common.output_dir.join(PMI),
        "position,omega",
        sums.iter().enumerate().map(|(i, s)| format!("{i},{}", s / n)),
    )?;
    Ok(())
}

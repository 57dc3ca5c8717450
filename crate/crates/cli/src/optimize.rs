use flowbo::boloop::{self, CallRecord, StopReason};
use flowbo::objectives::{make_objective, Oracle};
use flowbo::TokenSequence;
use serde::Serialize;

use crate::output::{self, Log};
use crate::{setup, Common, Failure};

pub const RUN_LOG: &str = "run_log.jsonl";
pub const BATCH_LOG: &str = "batches.jsonl";
pub const BEST_SO_FAR: &str = "best_so_far.csv";
pub const SUMMARY: &str = "summary.json";

#[derive(Serialize)]
struct Summary<'a> {
    method: &'a str,
    seed: u64,
    oracle_calls: usize,
    best_y: f64,
    best_tokens: Vec<usize>,
    objective_optimum: f64,
    stop_reason: Option<StopReason>,
    abort: Option<String>,
    /// Largest value-discrepancy ratio seen after any retraining.
    max_value_discrepancy: Option<f64>,
}

pub fn write_best_so_far(dir: &std::path::Path, calls: &[CallRecord]) -> anyhow::Result<()> {
    output::write_csv(
        &dir.join(BEST_SO_FAR),
        "call_index,best_y",
        calls.iter().map(|c| format!("{},{}", c.call_index, c.best_y)),
    )
}

pub fn run(common: &Common, random_search: bool, log: &Log) -> Result<(), Failure> {
    let cfg = setup::load(common)?;
    let objective = make_objective(&cfg.objective, cfg.flow.vocab_size, cfg.flow.seq_len)?;
    let optimum = objective.optimum();
    let dir = &common.output_dir;
    let mut oracle = objective;
    let mut calls_seen = 0usize;
    let mut logged = |x: &TokenSequence| {
        let y = oracle.evaluate(x)?;
        calls_seen += 1;
        if calls_seen.is_multiple_of(100) {
            log.debug(format!("{calls_seen} oracle calls"));
        }
        Ok(y)
    };
    if random_search {
        let n = cfg.run.n_init + cfg.run.budget;
        let res = boloop::random_search(n, cfg.flow.vocab_size, cfg.flow.seq_len, cfg.run.seed, &mut logged)?;
        output::write_jsonl(&dir.join(RUN_LOG), &res.calls)?;
        write_best_so_far(dir, &res.calls)?;
        let best = res.calls.iter().max_by(|a, b| a.y.total_cmp(&b.y).then(b.call_index.cmp(&a.call_index)));
        output::write_json(
            &dir.join(SUMMARY),
            &Summary {
                method: "random_search",
                seed: cfg.run.seed,
                oracle_calls: res.calls.len(),
                best_y: res.best_y,
                best_tokens: best.map(|c| c.tokens.clone()).unwrap_or_default(),
                objective_optimum: optimum,
                stop_reason: None,
                abort: None,
                max_value_discrepancy: None,
            },
        )?;
        log.info(format!("random search best {}", res.best_y));
        return Ok(());
    }
    let run_cfg = cfg.run_config();
    log.info(format!(
        "optimizing: {} initial + {} budgeted calls, {} regions x {} queries",
        run_cfg.run.n_init, run_cfg.run.budget, run_cfg.run.n_trust_regions, run_cfg.run.queries_per_region
    ));
    let res = boloop::run_bo(&run_cfg, &mut logged)?;
    output::write_jsonl(&dir.join(RUN_LOG), &res.calls)?;
    output::write_jsonl(&dir.join(BATCH_LOG), &res.batches)?;
    write_best_so_far(dir, &res.calls)?;
    setup::save_checkpoint(dir, &res.model, &res.table)?;
    let max_disc = res
        .batches
        .iter()
        .filter_map(|b| b.value_discrepancy)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    output::write_json(
        &dir.join(SUMMARY),
        &Summary {
            method: "flowbo",
            seed: cfg.run.seed,
            oracle_calls: res.calls.len(),
            best_y: res.best_y(),
            best_tokens: res.dataset.best().map(|r| r.x.0.clone()).unwrap_or_default(),
            objective_optimum: optimum,
            stop_reason: Some(res.stop_reason),
            abort: res.abort.clone(),
            max_value_discrepancy: max_disc,
        },
    )?;
    log.info(format!("best {} after {} calls ({:?})", res.best_y(), res.calls.len(), res.stop_reason));
    if let Some(reason) = res.abort {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "run aborted after {} oracle calls: {reason}",
            res.calls.len()
        )));
    }
    Ok(())
}

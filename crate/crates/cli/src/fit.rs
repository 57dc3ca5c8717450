use anyhow::Context;
use flowbo::boloop;
use flowbo::training;
use serde::Serialize;

use crate::output::{self, Log};
use crate::{setup, Common, Failure};

pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const FIT_SUMMARY: &str = "fit_summary.json";

#[derive(Serialize)]
struct FitSummary {
    n_sequences: usize,
    epochs: usize,
    n_params: usize,
    final_total_loss: Option<f64>,
    reconstruction_rate: f64,
}

pub fn run(common: &Common, log: &Log) -> Result<(), Failure> {
    let cfg = setup::load(common)?;
    let corpus = setup::corpus(&cfg)?.ok_or_else(|| {
        anyhow::Error::from(flowbo::Error::Config("fit needs data.corpus".into()))
    })?;
    let (model, table) = boloop::initial_codec(&cfg.flow, cfg.run.seed)?;
    log.info(format!(
        "training on {} sequences for {} epochs ({} flow parameters)",
        corpus.len(),
        cfg.train.epochs,
        model.n_params()
    ));
    let out = training::fit_flow(&corpus, &model, &table, &cfg.train).context("training failed")?;
    for h in &out.history {
        log.debug(format!("epoch {} total {:.6}", h.epoch, h.total));
    }
    let dir = &common.output_dir;
    output::write_jsonl(&dir.join(TRAINING_LOG), &out.history)?;
    setup::save_checkpoint(dir, &out.model, &out.table)?;
    let rate = training::reconstruction_rate(&corpus, &out.model, &out.table)?;
    output::write_json(
        &dir.join(FIT_SUMMARY),
        &FitSummary {
            n_sequences: corpus.len(),
            epochs: cfg.train.epochs,
            n_params: out.model.n_params(),
            final_total_loss: out.history.last().map(|h| h.total),
            reconstruction_rate: rate,
        },
    )?;
    log.info(format!("reconstruction rate {rate}"));
    Ok(())
}

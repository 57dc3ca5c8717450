//! Config loading and the pieces every command shares.

use std::path::Path;

use anyhow::{Context, Result};
use flowbo::config::ExperimentConfig;
use flowbo::vocab::{self, TokenSequence, Vocabulary};
use flowbo::{EmbeddingTable, FlowModel};

use crate::output;
use crate::Common;

pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";
pub const FLOW_CHECKPOINT: &str = "flow.bin";
pub const EMBEDDINGS_CHECKPOINT: &str = "embeddings.bin";

/// Loads and validates the config, applies the seed override and writes
/// the materialized config into the output directory.
pub fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    output::ensure_dir(&common.output_dir)?;
    output::write_text(&common.output_dir.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;
    Ok(cfg)
}

/// The configured vocabulary file, or the decimal integers `0..V`.
pub fn vocabulary(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    let vocab = match &cfg.data.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => Vocabulary::new((0..cfg.flow.vocab_size).map(|i| i.to_string()).collect())?,
    };
    if vocab.len() != cfg.flow.vocab_size {
        return Err(flowbo::Error::Config(format!(
            "vocabulary has {} entries but flow.vocab_size is {}",
            vocab.len(),
            cfg.flow.vocab_size
        ))
        .into());
    }
    Ok(vocab)
}

pub fn corpus(cfg: &ExperimentConfig) -> Result<Option<Vec<TokenSequence>>> {
    let Some(path) = &cfg.data.corpus else {
        return Ok(None);
    };
    let vocab = vocabulary(cfg)?;
    Ok(Some(vocab::load_corpus(path, &vocab, Some(cfg.flow.seq_len))?))
}

pub fn save_checkpoint(dir: &Path, model: &FlowModel, table: &EmbeddingTable) -> Result<()> {
    model.save(&dir.join(FLOW_CHECKPOINT))?;
    table.save(&dir.join(EMBEDDINGS_CHECKPOINT))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(FlowModel, EmbeddingTable)> {
    let model = FlowModel::load(&dir.join(FLOW_CHECKPOINT))
        .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let table = EmbeddingTable::load(&dir.join(EMBEDDINGS_CHECKPOINT))
        .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let c = model.config();
    if table.vocab_size() != c.vocab_size || table.embed_dim() != c.embed_dim {
        return Err(flowbo::Error::Config(format!(
            "embedding table is {}x{} but the flow expects {}x{}",
            table.vocab_size(),
            table.embed_dim(),
            c.vocab_size,
            c.embed_dim
        ))
        .into());
    }
    Ok((model, table))
}

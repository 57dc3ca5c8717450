//! The experiment file: a TOML document with one table per component.
//! Every field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boloop::{LoopSettings, RunConfig};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveSpec;
use crate::seqflow::FlowConfig;
use crate::surrogate::GpConfig;
use crate::tacs::TacsConfig;
use crate::training::TrainConfig;

/// Inputs for training on a fixed corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One sequence per line, whitespace-separated tokens.
    pub corpus: Option<PathBuf>,
    /// One token per line, PAD first. When absent, tokens are the integers
    /// `0..flow.vocab_size` written in decimal.
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Directory holding `flow.bin` and `embeddings.bin`.
    pub checkpoint: Option<PathBuf>,
    pub temperatures: Vec<f64>,
    pub seeds: usize,
    pub anchors: usize,
    pub n_cand: usize,
    /// Random sequences scored when no corpus is given.
    pub n_records: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            temperatures: vec![400.0, 200.0, 100.0],
            seeds: 5,
            anchors: 10,
            n_cand: 1000,
            n_records: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: LoopSettings,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub gp: GpConfig,
    pub tacs: TacsConfig,
    pub objective: ObjectiveSpec,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.corpus, &mut cfg.data.vocab, &mut cfg.eval.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully materialized configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        let e = &self.eval;
        if e.temperatures.is_empty() || e.temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("eval.temperatures must be a non-empty list of positive values".into()));
        }
        if e.seeds == 0 || e.anchors == 0 || e.n_cand == 0 {
            return Err(Error::Config("eval.seeds, eval.anchors and eval.n_cand must be at least 1".into()));
        }
        crate::objectives::make_objective(&self.objective, self.flow.vocab_size, self.flow.seq_len)?;
        Ok(())
    }

    /// The optimizer's view: everything except the objective and data.
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            run: self.run.clone(),
            flow: self.flow.clone(),
            train: self.train.clone(),
            gp: self.gp.clone(),
            tacs: self.tacs.clone(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.train.seed = seed;
        self
    }
}

//! Training objective `L_NLL + λ·L_sim`, its exact gradients, and the
//! mini-batch SGD trainer.
//!
//! The variational rows `v` are drawn from q′ once per step and then held
//! fixed, so the NLL term only reaches flow parameters and the similarity
//! term only reaches the embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{ContinuousRep, SeqMatrix};
use crate::rng::{self, FlowRng};
use crate::seqflow::{sample_v, standard_normal_log_density, FlowModel, SeqFlow, SequenceCodec};
use crate::vocab::{cosine, dot, norm, EmbeddingTable, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of q around each embedding.
    pub sigma: f64,
    pub max_attempts: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Compute the corpus reconstruction rate after every epoch.
    pub track_reconstruction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            sigma: 0.1,
            max_attempts: 100,
            seed: 0,
            grad_clip: 5.0,
            track_reconstruction: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("train.lambda must be non-negative".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("sigma", self.sigma),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub sim: f64,
    pub total: f64,
}

impl LossReport {
    pub fn combine(nll: f64, sim: f64, lambda: f64) -> Self {
        Self {
            nll,
            sim,
            total: nll + lambda * sim,
        }
    }
}

/// One sequence with its frozen q′ draw and negative tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub x: TokenSequence,
    pub v: ContinuousRep,
    /// Per position, a token drawn uniformly from the vocabulary minus `x_i`.
    pub negatives: Vec<usize>,
}

pub fn draw_negatives<R: Rng + ?Sized>(x: &TokenSequence, vocab_size: usize, rng: &mut R) -> Vec<usize> {
    x.tokens()
        .iter()
        .map(|&t| {
            let j = rng.random_range(0..vocab_size - 1);
            if j >= t {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

pub fn draw_samples<R: Rng + ?Sized>(
    x_batch: &[TokenSequence],
    table: &EmbeddingTable,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    x_batch
        .iter()
        .map(|x| {
            let v = sample_v(x, config.sigma, table, config.max_attempts, rng)?.v;
            let negatives = draw_negatives(x, table.vocab_size(), rng);
            Ok(TrainingSample {
                x: x.clone(),
                v,
                negatives,
            })
        })
        .collect()
}

/// Mean of `−log p(v)` over the batch.
pub fn nll_loss(v_batch: &[ContinuousRep], model: &FlowModel) -> Result<f64> {
    if v_batch.is_empty() {
        return Err(Error::Config("nll_loss of an empty batch".into()));
    }
    let mut sum = 0.0;
    for v in v_batch {
        sum -= model.log_prob_v(v)?;
    }
    Ok(sum / v_batch.len() as f64)
}

/// Contrastive similarity term with explicit negatives.
pub fn sim_loss_with(v: &ContinuousRep, x: &TokenSequence, negatives: &[usize], table: &EmbeddingTable) -> f64 {
    let l = x.len();
    if l == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, (&t, &n)) in x.tokens().iter().zip(negatives).enumerate() {
        acc += cosine(v.row(i), table.row(n)) - cosine(v.row(i), table.row(t));
    }
    acc / l as f64
}

/// Contrastive similarity term, drawing one negative per position.
pub fn sim_loss<R: Rng + ?Sized>(
    v: &ContinuousRep,
    x: &TokenSequence,
    table: &EmbeddingTable,
    rng: &mut R,
) -> Result<f64> {
    x.validate(table.vocab_size())?;
    let negatives = draw_negatives(x, table.vocab_size(), rng);
    Ok(sim_loss_with(v, x, &negatives, table))
}

pub fn loss_on_samples(
    samples: &[TrainingSample],
    model: &FlowModel,
    table: &EmbeddingTable,
    lambda: f64,
) -> Result<LossReport> {
    let vs: Vec<ContinuousRep> = samples.iter().map(|s| s.v.clone()).collect();
    let nll = nll_loss(&vs, model)?;
    let sim = samples
        .iter()
        .map(|s| sim_loss_with(&s.v, &s.x, &s.negatives, table))
        .sum::<f64>()
        / samples.len() as f64;
    Ok(LossReport::combine(nll, sim, lambda))
}

/// Draws q′ samples and negatives, then evaluates the combined loss on them.
pub fn total_loss<R: Rng + ?Sized>(
    x_batch: &[TokenSequence],
    model: &FlowModel,
    table: &EmbeddingTable,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossReport> {
    let samples = draw_samples(x_batch, table, config, rng)?;
    loss_on_samples(&samples, model, table, config.lambda)
}

/// Gradient of the combined loss for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Same layout as the model; each array holds `∂L/∂θ`.
    pub flow: FlowModel,
    /// `vocab_size × F`, row-major.
    pub embeddings: Vec<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let mut sq = dot(&self.embeddings, &self.embeddings);
        self.flow.visit_params(|_, p| sq += dot(p, p));
        sq.sqrt()
    }

    /// First parameter path holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.flow.visit_params(|path, p| {
            if bad.is_none() && p.iter().any(|v| !v.is_finite()) {
                bad = Some(path.to_string());
            }
        });
        if bad.is_none() && self.embeddings.iter().any(|v| !v.is_finite()) {
            bad = Some("embeddings".into());
        }
        bad
    }
}

pub fn gradients_on_samples(
    samples: &[TrainingSample],
    model: &FlowModel,
    table: &EmbeddingTable,
    lambda: f64,
) -> Result<(LossReport, Gradients)> {
    if samples.is_empty() {
        return Err(Error::Config("gradients of an empty batch".into()));
    }
    let b = samples.len() as f64;
    let mut grad = Gradients {
        flow: model.zeros_like(),
        embeddings: vec![0.0; table.as_slice().len()],
    };
    let f = table.embed_dim();
    let mut nll = 0.0;
    let mut sim = 0.0;
    for s in samples {
        let trace = model.normalize_traced(&s.v.0);
        if !trace.z.is_finite() {
            return Err(Error::Numeric("normalize output during training".into()));
        }
        nll -= standard_normal_log_density(trace.z.as_slice()) + trace.logdet;
        let mut dz = SeqMatrix::zeros(trace.z.rows(), trace.z.cols());
        for (d, z) in dz.as_mut_slice().iter_mut().zip(trace.z.as_slice()) {
            *d = z / b;
        }
        model.normalize_backward(&trace, &dz, -1.0 / b, &mut grad.flow);

        sim += sim_loss_with(&s.v, &s.x, &s.negatives, table);
        let l = s.x.len();
        if lambda != 0.0 && l > 0 {
            let w = lambda / (l as f64 * b);
            for (i, (&t, &n)) in s.x.tokens().iter().zip(&s.negatives).enumerate() {
                let vi = s.v.row(i);
                accumulate_cosine_grad(vi, table.row(t), -w, &mut grad.embeddings[t * f..(t + 1) * f]);
                accumulate_cosine_grad(vi, table.row(n), w, &mut grad.embeddings[n * f..(n + 1) * f]);
            }
        }
    }
    let report = LossReport::combine(nll / b, sim / b, lambda);
    if let Some(path) = grad.first_non_finite() {
        return Err(Error::Numeric(format!("gradient of {path}")));
    }
    Ok((report, grad))
}

/// `out += weight · ∂cos(v, e)/∂e`.
fn accumulate_cosine_grad(v: &[f64], e: &[f64], weight: f64, out: &mut [f64]) {
    let nv = norm(v);
    let ne = norm(e);
    let c = dot(v, e) / (nv * ne);
    for k in 0..e.len() {
        out[k] += weight * (v[k] / (nv * ne) - c * e[k] / (ne * ne));
    }
}

/// Draws the samples from `rng` and differentiates the loss on them.
pub fn gradients<R: Rng + ?Sized>(
    x_batch: &[TokenSequence],
    model: &FlowModel,
    table: &EmbeddingTable,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(LossReport, Gradients)> {
    let samples = draw_samples(x_batch, table, config, rng)?;
    gradients_on_samples(&samples, model, table, config.lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub sim: f64,
    pub total: f64,
    pub reconstruction_rate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: FlowModel,
    pub table: EmbeddingTable,
    pub history: Vec<EpochRecord>,
}

/// Fraction of sequences with `decode(encode(x)) = x`.
pub fn reconstruction_rate(corpus: &[TokenSequence], model: &FlowModel, table: &EmbeddingTable) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(1.0);
    }
    let codec = SeqFlow::new(model, table);
    let mut ok = 0usize;
    for x in corpus {
        if codec.decode(&codec.encode(x)?)? == *x {
            ok += 1;
        }
    }
    Ok(ok as f64 / corpus.len() as f64)
}

/// Mini-batch SGD with global-norm clipping. Embeddings are projected back
/// to unit norm after every step.
pub fn fit_flow(
    corpus: &[TokenSequence],
    model: &FlowModel,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    for x in corpus {
        x.validate(table.vocab_size())?;
    }
    let mut model = model.clone();
    let mut table = table.clone();
    let mut rng: FlowRng = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut sim, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let (report, grad) = gradients(&batch, &model, &table, config, &mut rng)?;
            let w = chunk.len() as f64;
            nll += w * report.nll;
            sim += w * report.sim;
            total += w * report.total;
            apply_sgd(&mut model, &mut table, &grad, config);
        }
        let n = corpus.len() as f64;
        let reconstruction_rate = if config.track_reconstruction {
            Some(reconstruction_rate(corpus, &model, &table)?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            nll: nll / n,
            sim: sim / n,
            total: total / n,
            reconstruction_rate,
        });
    }
    Ok(FitOutcome { model, table, history })
}

fn apply_sgd(model: &mut FlowModel, table: &mut EmbeddingTable, grad: &Gradients, config: &TrainConfig) {
    let gnorm = grad.norm();
    let scale = if gnorm > config.grad_clip {
        config.grad_clip / gnorm
    } else {
        1.0
    };
    let step = config.learning_rate * scale;
    let mut grads: Vec<&[f64]> = Vec::new();
    grad.flow.visit_params(|_, p| grads.push(p));
    let mut idx = 0;
    model.visit_params_mut(|_, p| {
        for (v, g) in p.iter_mut().zip(grads[idx]) {
            *v -= step * g;
        }
        idx += 1;
    });
    for (v, g) in table.as_mut_slice().iter_mut().zip(&grad.embeddings) {
        *v -= step * g;
    }
    table.renormalize();
}

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub n_checked: usize,
    /// Largest relative error among coordinates with `|g| ≥ floor`.
    pub max_rel_err: f64,
    /// Largest absolute error among the remaining near-zero coordinates.
    pub max_abs_err_small: f64,
    pub worst: String,
}

/// Finite-difference harness over every flow and embedding parameter.
/// The samples are frozen, so the loss is a deterministic function of the
/// parameters.
pub fn gradcheck(
    samples: &[TrainingSample],
    model: &FlowModel,
    table: &EmbeddingTable,
    lambda: f64,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grad) = gradients_on_samples(samples, model, table, lambda)?;
    let mut analytic: Vec<(String, f64)> = Vec::new();
    grad.flow.visit_params(|path, p| {
        analytic.extend(p.iter().enumerate().map(|(i, &g)| (format!("{path}[{i}]"), g)));
    });
    analytic.extend(grad.embeddings.iter().enumerate().map(|(i, &g)| (format!("embeddings[{i}]"), g)));

    let n_flow = model.n_params();
    let loss_at = |coord: usize, delta: f64| -> Result<f64> {
        if coord < n_flow {
            let mut m = model.clone();
            let mut seen = 0;
            m.visit_params_mut(|_, p| {
                if coord >= seen && coord < seen + p.len() {
                    p[coord - seen] += delta;
                }
                seen += p.len();
            });
            Ok(loss_on_samples(samples, &m, table, lambda)?.total)
        } else {
            let mut t = table.clone();
            t.as_mut_slice()[coord - n_flow] += delta;
            Ok(loss_on_samples(samples, model, &t, lambda)?.total)
        }
    };

    let mut out = GradCheck {
        n_checked: analytic.len(),
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst: String::new(),
    };
    for (coord, (path, a)) in analytic.iter().enumerate() {
        let fd = (loss_at(coord, h)? - loss_at(coord, -h)?) / (2.0 * h);
        let scale = a.abs().max(fd.abs());
        if scale >= floor {
            let rel = (a - fd).abs() / scale;
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = path.clone();
            }
        } else {
            out.max_abs_err_small = out.max_abs_err_small.max((a - fd).abs());
        }
    }
    Ok(out)
}

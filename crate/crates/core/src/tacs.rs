//! Token-level adaptive candidate sampling: PMI importance per latent token,
//! perturbation probabilities, trust regions and candidate generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::LatentSeq;
use crate::rng;
use crate::seqflow::FlowModel;
use crate::vocab::{EmbeddingTable, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionConfig {
    pub length_init: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub success_tol: usize,
    pub fail_tol: usize,
    /// Relative margin a batch must beat the anchor by to count as success.
    pub improvement_tol: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            length_init: 0.8,
            length_min: 0.5f64.powi(7),
            length_max: 1.6,
            success_tol: 3,
            fail_tol: 10,
            improvement_tol: 1e-3,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.length_min > 0.0
            && self.length_min <= self.length_init
            && self.length_init <= self.length_max
            && self.length_max.is_finite()
            && self.success_tol >= 1
            && self.fail_tol >= 1
            && self.improvement_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "trust region needs 0 < length_min <= length_init <= length_max and tolerances >= 1".into(),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TacsConfig {
    /// When false, every token gets the uniform probability `min(κ/L, 1)`.
    pub enabled: bool,
    pub temperature: f64,
    /// Defaults to `min(20, L)`.
    pub kappa: Option<f64>,
    pub epsilon: f64,
    pub n_mc: usize,
    pub trust_region: TrustRegionConfig,
}

impl Default for TacsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            temperature: 400.0,
            kappa: None,
            epsilon: 1e-6,
            n_mc: 10,
            trust_region: TrustRegionConfig::default(),
        }
    }
}

impl TacsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("tacs.temperature must be positive".into()));
        }
        if let Some(k) = self.kappa {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::Config("tacs.kappa must be positive".into()));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("tacs.epsilon must be positive".into()));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("tacs.n_mc must be at least 1".into()));
        }
        self.trust_region.validate()
    }

    pub fn kappa_for(&self, seq_len: usize) -> f64 {
        self.kappa.unwrap_or_else(|| (seq_len as f64).min(20.0))
    }
}

/// PMI scores and the perturbation probabilities derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenImportance {
    pub omega: Vec<f64>,
    pub probs: Vec<f64>,
    pub temperature: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub n_mc: usize,
}

/// `1 + ε` when `v_i` maps to `x_i`, else `ε`.
pub fn stabilized_token_prob(x_i: usize, v_i: &[f64], table: &EmbeddingTable, epsilon: f64) -> Result<f64> {
    Ok(if table.nearest_token(v_i)? == x_i {
        1.0 + epsilon
    } else {
        epsilon
    })
}

/// `log Π_i p(x_i | v_i)` with stabilized per-token probabilities.
pub fn log_stabilized_likelihood(
    x: &TokenSequence,
    z: &LatentSeq,
    model: &FlowModel,
    table: &EmbeddingTable,
    epsilon: f64,
) -> Result<f64> {
    let v = model.generate(z)?;
    if x.len() != v.rows() {
        return Err(Error::Shape {
            expected: format!("{} tokens", v.rows()),
            got: format!("{}", x.len()),
        });
    }
    let mut total = 0.0;
    for (i, &t) in x.tokens().iter().enumerate() {
        total += stabilized_token_prob(t, v.row(i), table, epsilon)?.ln();
    }
    Ok(total)
}

/// `ω = log p − log mean_m exp(q_m)`, computed with log-sum-exp.
pub fn pmi_from_log_likelihoods(log_p: f64, resampled: &[f64]) -> f64 {
    let max = resampled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = resampled.iter().map(|q| (q - max).exp()).sum();
    log_p - (max + (sum / resampled.len() as f64).ln())
}

/// Monte Carlo PMI between each latent token and the decoded sequence:
/// row `i` of `z` is replaced by a fresh standard-normal vector `n_mc` times.
pub fn pmi_scores<R: Rng + ?Sized>(
    z: &LatentSeq,
    x: &TokenSequence,
    model: &FlowModel,
    table: &EmbeddingTable,
    n_mc: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    let log_p = log_stabilized_likelihood(x, z, model, table, epsilon)?;
    let mut omega = Vec::with_capacity(z.rows());
    let mut perturbed = z.clone();
    let mut resampled = vec![0.0; n_mc];
    for i in 0..z.rows() {
        for q in resampled.iter_mut() {
            rng::fill_standard_normal(rng, perturbed.row_mut(i));
            *q = log_stabilized_likelihood(x, &perturbed, model, table, epsilon)?;
        }
        perturbed.row_mut(i).copy_from_slice(z.row(i));
        omega.push(pmi_from_log_likelihoods(log_p, &resampled));
    }
    Ok(omega)
}

/// `π_i = min(κ·softmax(ω/τ)_i, 1)`.
pub fn tacs_probs(omega: &[f64], tau: f64, kappa: f64) -> Vec<f64> {
    let max = omega.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = omega.iter().map(|o| ((o - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|s| (kappa * s / total).min(1.0)).collect()
}

/// The TuRBO-style baseline: every token perturbed with `min(κ/L, 1)`.
pub fn uniform_probs(seq_len: usize, kappa: f64) -> Vec<f64> {
    vec![(kappa / seq_len as f64).min(1.0); seq_len]
}

/// PMI and probabilities at an anchor, or uniform probabilities when TACS
/// is disabled (no Monte Carlo work is done then).
pub fn token_importance<R: Rng + ?Sized>(
    z: &LatentSeq,
    x: &TokenSequence,
    model: &FlowModel,
    table: &EmbeddingTable,
    config: &TacsConfig,
    rng: &mut R,
) -> Result<TokenImportance> {
    let l = z.rows();
    let kappa = config.kappa_for(l);
    let (omega, probs) = if config.enabled {
        let omega = pmi_scores(z, x, model, table, config.n_mc, config.epsilon, rng)?;
        let probs = tacs_probs(&omega, config.temperature, kappa);
        (omega, probs)
    } else {
        (vec![0.0; l], uniform_probs(l, kappa))
    };
    Ok(TokenImportance {
        omega,
        probs,
        temperature: config.temperature,
        kappa,
        epsilon: config.epsilon,
        n_mc: config.n_mc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustRegionState {
    pub anchor_z: LatentSeq,
    pub anchor_y: f64,
    pub length: f64,
    pub success_count: usize,
    pub failure_count: usize,
    pub success_tol: usize,
    pub fail_tol: usize,
    pub length_min: f64,
    pub length_max: f64,
    pub improvement_tol: f64,
}

impl TrustRegionState {
    pub fn new(anchor_z: LatentSeq, anchor_y: f64, config: &TrustRegionConfig) -> Self {
        Self {
            anchor_z,
            anchor_y,
            length: config.length_init,
            success_count: 0,
            failure_count: 0,
            success_tol: config.success_tol,
            fail_tol: config.fail_tol,
            length_min: config.length_min,
            length_max: config.length_max,
            improvement_tol: config.improvement_tol,
        }
    }

    pub fn recenter(&mut self, anchor_z: LatentSeq, anchor_y: f64) {
        self.anchor_z = anchor_z;
        self.anchor_y = anchor_y;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustRegionUpdate {
    pub state: TrustRegionState,
    /// The batch beat the anchor by more than the relative tolerance.
    pub improved: bool,
    /// Length fell below `length_min`; the caller should restart the region.
    pub restart: bool,
}

pub fn update_trust_region(tr: &TrustRegionState, batch_best_y: f64) -> TrustRegionUpdate {
    let mut s = tr.clone();
    let improved = batch_best_y > tr.anchor_y + tr.improvement_tol * tr.anchor_y.abs();
    if improved {
        s.success_count += 1;
        s.failure_count = 0;
    } else {
        s.failure_count += 1;
        s.success_count = 0;
    }
    if s.success_count >= s.success_tol {
        s.length = (2.0 * s.length).min(s.length_max);
        s.success_count = 0;
    }
    if s.failure_count >= s.fail_tol {
        s.length /= 2.0;
        s.failure_count = 0;
    }
    let restart = s.length < s.length_min;
    TrustRegionUpdate {
        state: s,
        improved,
        restart,
    }
}

/// Candidates around the anchor plus the token mask used for each.
pub fn sample_candidates_with_masks<R: Rng + ?Sized>(
    tr: &TrustRegionState,
    probs: &[f64],
    n_cand: usize,
    rng: &mut R,
) -> Result<(Vec<LatentSeq>, Vec<Vec<bool>>)> {
    if n_cand == 0 {
        return Err(Error::Config("n_cand must be at least 1".into()));
    }
    let l = tr.anchor_z.rows();
    if probs.len() != l {
        return Err(Error::Shape {
            expected: format!("{l} probabilities"),
            got: format!("{}", probs.len()),
        });
    }
    let half = tr.length / 2.0;
    let mut cands = Vec::with_capacity(n_cand);
    let mut masks = Vec::with_capacity(n_cand);
    let f = tr.anchor_z.cols();
    let mut offsets = vec![0.0; l * f];
    for _ in 0..n_cand {
        // Draws are consumed the same way whatever the mask, so two
        // probability vectors fed the same stream give paired candidates.
        let u: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
        offsets.iter_mut().for_each(|o| *o = rng.random::<f64>());
        let mut mask: Vec<bool> = u.iter().zip(probs).map(|(u, &p)| *u < p).collect();
        if !mask.iter().any(|&m| m) {
            mask[rng.random_range(0..l)] = true;
        }
        let mut z = tr.anchor_z.clone();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let off = &offsets[i * f..(i + 1) * f];
            for ((v, a), o) in z.row_mut(i).iter_mut().zip(tr.anchor_z.row(i)).zip(off) {
                *v = a - half + tr.length * o;
            }
        }
        cands.push(z);
        masks.push(mask);
    }
    Ok((cands, masks))
}

pub fn sample_candidates<R: Rng + ?Sized>(
    tr: &TrustRegionState,
    probs: &[f64],
    n_cand: usize,
    rng: &mut R,
) -> Result<Vec<LatentSeq>> {
    Ok(sample_candidates_with_masks(tr, probs, n_cand, rng)?.0)
}

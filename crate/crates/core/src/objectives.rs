//! Synthetic black-box objectives over token sequences with computable
//! optima. Hidden parameters live in a sealed section that the optimizer
//! never sees: it only interacts through [`Oracle`].

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{TokenSequence, PAD};

/// A black-box sequence objective. `&mut self` lets wrappers count calls or
/// inject failures.
pub trait Oracle {
    fn evaluate(&mut self, x: &TokenSequence) -> Result<f64>;
}

impl<F> Oracle for F
where
    F: FnMut(&TokenSequence) -> Result<f64>,
{
    fn evaluate(&mut self, x: &TokenSequence) -> Result<f64> {
        self(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Motif,
    WeightedPairs,
    Composite,
}

/// Hidden parameters. Anything left unset is drawn from `seed`.
#[derive(Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SealedParams {
    pub target: Option<Vec<usize>>,
    pub pair_weights: Option<Vec<Vec<f64>>>,
}

impl fmt::Debug for SealedParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SealedParams(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub seed: u64,
    /// Convex weights `(motif, pairs)` for the composite kind.
    pub weights: [f64; 2],
    pub sealed: SealedParams,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Motif,
            seed: 0,
            weights: [0.5, 0.5],
            sealed: SealedParams::default(),
        }
    }
}

/// Row-major `V × V` table of adjacent-pair rewards.
#[derive(Clone, PartialEq)]
pub struct PairWeights {
    vocab_size: usize,
    data: Vec<f64>,
}

impl PairWeights {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let v = rows.len();
        if rows.iter().any(|r| r.len() != v) {
            return Err(Error::Config("pair_weights must be a square table".into()));
        }
        if rows.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Config("pair_weights must be finite".into()));
        }
        Ok(Self {
            vocab_size: v,
            data: rows.concat(),
        })
    }

    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            data: vec![0.0; vocab_size * vocab_size],
        }
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.vocab_size + b]
    }
}

/// Fraction of the target's non-PAD positions that `x` reproduces.
pub fn motif_match(x: &TokenSequence, target: &TokenSequence) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (i, &t) in target.tokens().iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if x.tokens().get(i) == Some(&t) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Mean reward over adjacent pairs in which neither token is PAD.
pub fn weighted_pairs(x: &TokenSequence, weights: &PairWeights) -> f64 {
    let (sum, count) = x
        .tokens()
        .windows(2)
        .filter(|w| w[0] != PAD && w[1] != PAD)
        .fold((0.0, 0usize), |(s, c), w| (s + weights.get(w[0], w[1]), c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// A concrete objective. Its `Debug` output hides the sealed parameters.
#[derive(Clone)]
pub struct Objective {
    kind: ObjectiveKind,
    mix: [f64; 2],
    target: TokenSequence,
    pairs: PairWeights,
    vocab_size: usize,
    seq_len: usize,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("kind", &self.kind)
            .field("vocab_size", &self.vocab_size)
            .field("seq_len", &self.seq_len)
            .finish_non_exhaustive()
    }
}

pub fn make_objective(spec: &ObjectiveSpec, vocab_size: usize, seq_len: usize) -> Result<Objective> {
    if vocab_size < 2 || seq_len == 0 {
        return Err(Error::Config(format!(
            "objective needs vocab_size >= 2 and seq_len >= 1, got {vocab_size} and {seq_len}"
        )));
    }
    let [a, b] = spec.weights;
    let mix = match spec.kind {
        ObjectiveKind::Motif => [1.0, 0.0],
        ObjectiveKind::WeightedPairs => [0.0, 1.0],
        ObjectiveKind::Composite => {
            if !(a >= 0.0 && b >= 0.0 && ((a + b) - 1.0).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "composite weights must be non-negative and sum to 1, got [{a}, {b}]"
                )));
            }
            [a, b]
        }
    };
    let target = match &spec.sealed.target {
        Some(t) => {
            let t = TokenSequence::new(t.clone());
            if t.len() != seq_len {
                return Err(Error::Config(format!(
                    "sealed target has length {}, expected {seq_len}",
                    t.len()
                )));
            }
            t.validate(vocab_size)?;
            t
        }
        None => {
            let mut r = rng::substream(spec.seed, 1);
            TokenSequence::new((0..seq_len).map(|_| r.random_range(1..vocab_size)).collect())
        }
    };
    let pairs = match &spec.sealed.pair_weights {
        Some(rows) => {
            let p = PairWeights::from_rows(rows)?;
            if p.vocab_size != vocab_size {
                return Err(Error::Config(format!(
                    "sealed pair_weights is {0}x{0}, expected {vocab_size}x{vocab_size}",
                    p.vocab_size
                )));
            }
            p
        }
        None => {
            let mut r = rng::substream(spec.seed, 2);
            PairWeights {
                vocab_size,
                data: (0..vocab_size * vocab_size).map(|_| r.random::<f64>()).collect(),
            }
        }
    };
    Ok(Objective {
        kind: spec.kind,
        mix,
        target,
        pairs,
        vocab_size,
        seq_len,
    })
}

impl Objective {
    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn value(&self, x: &TokenSequence) -> f64 {
        let mut y = 0.0;
        if self.mix[0] > 0.0 {
            y += self.mix[0] * motif_match(x, &self.target);
        }
        if self.mix[1] > 0.0 {
            y += self.mix[1] * weighted_pairs(x, &self.pairs);
        }
        y
    }

    /// Exact maximum over all `V^L` sequences.
    ///
    /// For each possible number `m` of valid (non-PAD) pairs the score is
    /// additive over positions, so a DP over (position, last token, pairs so
    /// far) finds the best sequence with exactly `m` pairs.
    pub fn optimum(&self) -> f64 {
        let (v, l) = (self.vocab_size, self.seq_len);
        let n_target = self.target.tokens().iter().filter(|&&t| t != PAD).count();
        let match_w = if n_target == 0 { 0.0 } else { self.mix[0] / n_target as f64 };
        let gain = |i: usize, t: usize| {
            let tt = self.target.tokens()[i];
            if tt != PAD && tt == t {
                match_w
            } else {
                0.0
            }
        };
        let mut best = f64::NEG_INFINITY;
        for m in 0..l {
            let pair_w = if m == 0 { 0.0 } else { self.mix[1] / m as f64 };
            // dp[t][c]: best score of a prefix ending in token t with c pairs.
            let mut dp = vec![vec![f64::NEG_INFINITY; m + 1]; v];
            for (t, row) in dp.iter_mut().enumerate() {
                row[0] = gain(0, t);
            }
            for i in 1..l {
                let mut next = vec![vec![f64::NEG_INFINITY; m + 1]; v];
                for prev in 0..v {
                    for c in 0..=m {
                        let s = dp[prev][c];
                        if s == f64::NEG_INFINITY {
                            continue;
                        }
                        for (t, row) in next.iter_mut().enumerate() {
                            let valid = prev != PAD && t != PAD;
                            let (c2, extra) = if valid {
                                (c + 1, pair_w * self.pairs.get(prev, t))
                            } else {
                                (c, 0.0)
                            };
                            if c2 <= m {
                                let cand = s + extra + gain(i, t);
                                if cand > row[c2] {
                                    row[c2] = cand;
                                }
                            }
                        }
                    }
                }
                dp = next;
            }
            for row in &dp {
                best = best.max(row[m]);
            }
        }
        best
    }

    /// Exhaustive maximum, for instances with at most 10⁶ sequences.
    pub fn brute_force_max(&self) -> Result<(f64, TokenSequence)> {
        let n = (self.vocab_size as f64).powi(self.seq_len as i32);
        if n > 1e6 {
            return Err(Error::Config(format!("{n} sequences is too many to enumerate")));
        }
        let mut x = vec![0usize; self.seq_len];
        let mut best = (f64::NEG_INFINITY, TokenSequence::new(x.clone()));
        loop {
            let seq = TokenSequence::new(x.clone());
            let y = self.value(&seq);
            if y > best.0 {
                best = (y, seq);
            }
            let mut i = 0;
            loop {
                if i == self.seq_len {
                    return Ok(best);
                }
                x[i] += 1;
                if x[i] < self.vocab_size {
                    break;
                }
                x[i] = 0;
                i += 1;
            }
        }
    }
}

impl Oracle for Objective {
    fn evaluate(&mut self, x: &TokenSequence) -> Result<f64> {
        if x.len() != self.seq_len {
            return Err(Error::Oracle(format!(
                "expected {} tokens, got {}",
                self.seq_len,
                x.len()
            )));
        }
        x.validate(self.vocab_size).map_err(|e| Error::Oracle(e.to_string()))?;
        Ok(self.value(x))
    }
}

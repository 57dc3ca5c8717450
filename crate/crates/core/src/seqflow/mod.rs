//! The invertible sequence flow.
//!
//! `K` autoregressive blocks, each a stack of affine coupling layers that
//! share one recurrent context per position. Block `k` maps its data-side
//! input `z^{k+1}` to its base-side output `z^k`; the context for position
//! `i` is the aggregator's hidden state after reading `z^{k+1}_{<i}`.
//!
//! * [`FlowModel::normalize`] (`v → z`) applies blocks `K−1, …, 0`. Every
//!   data-side row is known up front, so all positions are independent.
//! * [`FlowModel::generate`] (`z → v`) applies blocks `0, …, K−1` and has to
//!   produce position `i` of a block before its context for `i+1` exists.
//!
//! Together with nearest-embedding decoding this makes
//! `decode(encode(x)) = x` for any parameters.

mod coupling;
mod lstm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use coupling::{apply_generate, apply_normalize, Conditioner, CouplingLayer, ScaleShift};
pub use lstm::{aggregate_context, LstmCell, LstmState};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::{ContinuousRep, LatentSeq, SeqMatrix};
use crate::rng;
use crate::vocab::{EmbeddingTable, TokenSequence};
use coupling::CouplingCache;
use lstm::StepCache;

const FLOW_MAGIC: &[u8; 8] = b"FBOFLOW1";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    /// Per-token feature width `F`; must equal the embedding dimension.
    pub embed_dim: usize,
    /// Aggregator hidden size `H`.
    pub context_dim: usize,
    /// Conditioner hidden width.
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub s_max: f64,
    /// Scale of the conditioners' output layer at initialization. Zero
    /// starts from the identity flow.
    pub init_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            layers_per_block: 4,
            embed_dim: 8,
            context_dim: 64,
            hidden_dim: 64,
            seq_len: 12,
            vocab_size: 8,
            s_max: 5.0,
            init_scale: 0.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("layers_per_block", self.layers_per_block),
            ("context_dim", self.context_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("flow.{name} must be positive")));
            }
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("flow.embed_dim must be at least 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("flow.vocab_size must be at least 2".into()));
        }
        if !(self.s_max.is_finite() && self.s_max > 0.0) {
            return Err(Error::Config("flow.s_max must be positive".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("flow.init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBlock {
    pub(crate) aggregator: LstmCell,
    pub(crate) layers: Vec<CouplingLayer>,
}

impl FlowBlock {
    pub fn aggregator(&self) -> &LstmCell {
        &self.aggregator
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// All positions of the block in the normalize direction.
    fn normalize(&self, y: &SeqMatrix) -> (SeqMatrix, f64) {
        let rows: Vec<&[f64]> = y.iter_rows().collect();
        let contexts = self.aggregator.contexts(&rows, y.rows());
        let mut out = SeqMatrix::zeros(y.rows(), y.cols());
        let mut logdet = 0.0;
        let mut buf = vec![0.0; y.cols()];
        for (i, ctx) in contexts.iter().enumerate() {
            let mut cur = y.row(i).to_vec();
            for layer in self.layers.iter().rev() {
                logdet += layer.normalize(&cur, ctx, &mut buf);
                std::mem::swap(&mut cur, &mut buf);
            }
            out.row_mut(i).copy_from_slice(&cur);
        }
        (out, logdet)
    }

    /// One position in the generate direction given its context.
    fn generate_row(&self, z_row: &[f64], context: &[f64]) -> Vec<f64> {
        let mut cur = z_row.to_vec();
        let mut buf = vec![0.0; cur.len()];
        for layer in &self.layers {
            layer.generate(&cur, context, &mut buf);
            std::mem::swap(&mut cur, &mut buf);
        }
        cur
    }

    fn generate(&self, z: &SeqMatrix) -> SeqMatrix {
        let mut out = SeqMatrix::zeros(z.rows(), z.cols());
        let mut state = self.aggregator.initial_state();
        for i in 0..z.rows() {
            let y = self.generate_row(z.row(i), &state.h);
            if i + 1 < z.rows() {
                state = self.aggregator.step(&y, &state);
            }
            out.row_mut(i).copy_from_slice(&y);
        }
        out
    }
}

/// Forward activations of one block, kept for backpropagation.
pub(crate) struct BlockTrace {
    lstm: Vec<StepCache>,
    /// `[position][layer]` in application order (last layer first).
    layers: Vec<Vec<CouplingCache>>,
}

pub(crate) struct FlowTrace {
    /// Indexed by block.
    blocks: Vec<BlockTrace>,
    pub z: SeqMatrix,
    pub logdet: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    blocks: Vec<FlowBlock>,
}

impl FlowModel {
    /// All parameters zero: the identity map with zero log-det.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_blocks)
            .map(|_| FlowBlock {
                aggregator: LstmCell::zeros(config.embed_dim, config.context_dim),
                layers: (0..config.layers_per_block)
                    .map(|l| {
                        CouplingLayer::zeros(
                            l,
                            config.embed_dim,
                            config.context_dim,
                            config.hidden_dim,
                            config.s_max,
                        )
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { config, blocks })
    }

    /// Training initialization: random aggregators and conditioner inputs,
    /// output layers scaled by `config.init_scale`.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let blocks = (0..c.n_blocks)
            .map(|_| FlowBlock {
                aggregator: LstmCell::random(c.embed_dim, c.context_dim, 1.0, rng),
                layers: (0..c.layers_per_block)
                    .map(|l| {
                        CouplingLayer::random(l, c.embed_dim, c.context_dim, c.hidden_dim, c.s_max, c.init_scale, rng)
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { config, blocks })
    }

    /// Every parameter drawn as `scale · N(0, 1)`. Arbitrary models for
    /// invariant checks.
    pub fn random<R: Rng + ?Sized>(config: FlowConfig, scale: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let blocks = (0..c.n_blocks)
            .map(|_| FlowBlock {
                aggregator: LstmCell::random_dense(c.embed_dim, c.context_dim, scale, rng),
                layers: (0..c.layers_per_block)
                    .map(|l| CouplingLayer::random_dense(l, c.embed_dim, c.context_dim, c.hidden_dim, c.s_max, scale, rng))
                    .collect(),
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [FlowBlock] {
        &mut self.blocks
    }

    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        m.visit_params_mut(|_, p| p.iter_mut().for_each(|v| *v = 0.0));
        m
    }

    fn check_shape(&self, m: &SeqMatrix) -> Result<()> {
        if m.cols() != self.config.embed_dim {
            return Err(Error::Shape {
                expected: format!("{} features per row", self.config.embed_dim),
                got: format!("{}", m.cols()),
            });
        }
        if !m.is_finite() {
            return Err(Error::Numeric("flow input".into()));
        }
        Ok(())
    }

    /// `v → (z, log|det ∂z/∂v|)`.
    pub fn normalize(&self, v: &ContinuousRep) -> Result<(LatentSeq, f64)> {
        self.check_shape(v)?;
        let mut cur = v.0.clone();
        let mut logdet = 0.0;
        for block in self.blocks.iter().rev() {
            let (next, ld) = block.normalize(&cur);
            cur = next;
            logdet += ld;
        }
        self.check_output(&cur, "normalize")?;
        Ok((LatentSeq(cur), logdet))
    }

    /// `z → v`, the exact inverse of [`normalize`](Self::normalize).
    pub fn generate(&self, z: &LatentSeq) -> Result<ContinuousRep> {
        self.check_shape(z)?;
        let mut cur = z.0.clone();
        for block in &self.blocks {
            cur = block.generate(&cur);
        }
        self.check_output(&cur, "generate")?;
        Ok(ContinuousRep(cur))
    }

    fn check_output(&self, m: &SeqMatrix, what: &str) -> Result<()> {
        if m.is_finite() {
            return Ok(());
        }
        let position = m
            .iter_rows()
            .position(|r| r.iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        Err(Error::Numeric(format!("{what} output at position {position}")))
    }

    /// Position-by-position generation, for autoregressive use.
    pub fn generator(&self) -> IncrementalGenerator<'_> {
        IncrementalGenerator {
            model: self,
            states: self.blocks.iter().map(|b| b.aggregator.initial_state()).collect(),
        }
    }

    /// `log N(z; 0, I) + log|det|` over all `L·F` entries.
    pub fn log_prob_v(&self, v: &ContinuousRep) -> Result<f64> {
        let (z, logdet) = self.normalize(v)?;
        Ok(standard_normal_log_density(z.as_slice()) + logdet)
    }

    pub(crate) fn normalize_traced(&self, v: &SeqMatrix) -> FlowTrace {
        let l = v.rows();
        let mut cur = v.clone();
        let mut logdet = 0.0;
        let mut traces: Vec<Option<BlockTrace>> = (0..self.blocks.len()).map(|_| None).collect();
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let mut state = block.aggregator.initial_state();
            let mut lstm = Vec::with_capacity(l.saturating_sub(1));
            let mut layer_caches = Vec::with_capacity(l);
            let mut out = SeqMatrix::zeros(l, cur.cols());
            let mut buf = vec![0.0; cur.cols()];
            for i in 0..l {
                let ctx = state.h.clone();
                let mut row = cur.row(i).to_vec();
                let mut caches = Vec::with_capacity(block.layers.len());
                for layer in block.layers.iter().rev() {
                    let (ld, cache) = layer.normalize_cached(&row, &ctx, &mut buf);
                    logdet += ld;
                    caches.push(cache);
                    std::mem::swap(&mut row, &mut buf);
                }
                out.row_mut(i).copy_from_slice(&row);
                layer_caches.push(caches);
                if i + 1 < l {
                    let (next, cache) = block.aggregator.step_cached(cur.row(i), &state);
                    lstm.push(cache);
                    state = next;
                }
            }
            traces[k] = Some(BlockTrace {
                lstm,
                layers: layer_caches,
            });
            cur = out;
        }
        FlowTrace {
            blocks: traces.into_iter().map(|t| t.expect("every block traced")).collect(),
            z: cur,
            logdet,
        }
    }

    /// Reverse-mode pass through [`normalize`](Self::normalize). `dz` is the
    /// gradient w.r.t. `z` and `dlogdet` w.r.t. the total log-det; parameter
    /// gradients are accumulated into `grad`. Returns the gradient w.r.t. `v`.
    pub(crate) fn normalize_backward(
        &self,
        trace: &FlowTrace,
        dz: &SeqMatrix,
        dlogdet: f64,
        grad: &mut FlowModel,
    ) -> SeqMatrix {
        let (l, f) = (dz.rows(), dz.cols());
        let h = self.config.context_dim;
        let mut d = dz.clone();
        for (k, block) in self.blocks.iter().enumerate() {
            let bt = &trace.blocks[k];
            let gblock = &mut grad.blocks[k];
            let mut dy = SeqMatrix::zeros(l, f);
            let mut dctx = vec![vec![0.0; h]; l];
            let mut dl = vec![0.0; f];
            for i in 0..l {
                let mut g = d.row(i).to_vec();
                // Caches are in application order, i.e. layer n−1 first.
                let n_layers = block.layers.len();
                for (applied, cache) in bt.layers[i].iter().enumerate().rev() {
                    let idx = n_layers - 1 - applied;
                    block.layers[idx].normalize_backward(
                        cache,
                        &g,
                        dlogdet,
                        &mut dl,
                        &mut dctx[i],
                        &mut gblock.layers[idx],
                    );
                    std::mem::swap(&mut g, &mut dl);
                }
                for (a, b) in dy.row_mut(i).iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if l > 0 {
                let mut dh = dctx[l - 1].clone();
                let mut dc = vec![0.0; h];
                for t in (1..l).rev() {
                    let (dx, dh_prev, dc_prev) =
                        block.aggregator.step_backward(&bt.lstm[t - 1], &dh, &dc, &mut gblock.aggregator);
                    for (a, b) in dy.row_mut(t - 1).iter_mut().zip(&dx) {
                        *a += b;
                    }
                    dh = dh_prev;
                    for (a, b) in dh.iter_mut().zip(&dctx[t - 1]) {
                        *a += b;
                    }
                    dc = dc_prev;
                }
                for (a, b) in gblock.aggregator.h0.iter_mut().zip(&dh) {
                    *a += b;
                }
                for (a, b) in gblock.aggregator.c0.iter_mut().zip(&dc) {
                    *a += b;
                }
            }
            d = dy;
        }
        d
    }

    /// Visits every parameter array with a stable dotted path.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(&str, &'a [f64])) {
        for (k, block) in self.blocks.iter().enumerate() {
            for (name, p) in block.aggregator.params() {
                f(&format!("block{k}.aggregator.{name}"), p);
            }
            for (l, layer) in block.layers.iter().enumerate() {
                for (name, p) in layer.net.params() {
                    f(&format!("block{k}.layer{l}.{name}"), p);
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (k, block) in self.blocks.iter_mut().enumerate() {
            for (name, p) in block.aggregator.params_mut() {
                f(&format!("block{k}.aggregator.{name}"), p);
            }
            for (l, layer) in block.layers.iter_mut().enumerate() {
                for (name, p) in layer.net.params_mut() {
                    f(&format!("block{k}.layer{l}.{name}"), p);
                }
            }
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p| n += p.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(|_, p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let c = &self.config;
        let mut w = Writer::new(FLOW_MAGIC);
        for v in [
            c.n_blocks,
            c.layers_per_block,
            c.embed_dim,
            c.context_dim,
            c.hidden_dim,
            c.seq_len,
            c.vocab_size,
        ] {
            w.u64(v as u64);
        }
        w.f64(c.s_max);
        w.f64(c.init_scale);
        self.visit_params(|_, p| w.f64s(p));
        binio::write_file(path, &w.finish())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = Reader::new(path, &bytes, FLOW_MAGIC)?;
        let config = FlowConfig {
            n_blocks: r.usize()?,
            layers_per_block: r.usize()?,
            embed_dim: r.usize()?,
            context_dim: r.usize()?,
            hidden_dim: r.usize()?,
            seq_len: r.usize()?,
            vocab_size: r.usize()?,
            s_max: r.f64()?,
            init_scale: r.f64()?,
        };
        let mut model = Self::identity(config).map_err(|e| Error::format(path, e.to_string()))?;
        let mut failure = None;
        model.visit_params_mut(|name, p| {
            if failure.is_some() {
                return;
            }
            match r.f64s(p.len()) {
                Ok(vals) => p.copy_from_slice(&vals),
                Err(e) => failure = Some(format!("{name}: {e}")),
            }
        });
        if let Some(reason) = failure {
            return Err(Error::format(path, reason));
        }
        r.finish()?;
        Ok(model)
    }
}

/// Generates one position at a time, carrying each block's recurrent state.
pub struct IncrementalGenerator<'a> {
    model: &'a FlowModel,
    states: Vec<LstmState>,
}

impl IncrementalGenerator<'_> {
    pub fn push(&mut self, z_row: &[f64]) -> Vec<f64> {
        let mut cur = z_row.to_vec();
        for (block, state) in self.model.blocks.iter().zip(self.states.iter_mut()) {
            let y = block.generate_row(&cur, &state.h);
            *state = block.aggregator.step(&y, state);
            cur = y;
        }
        cur
    }
}

pub fn standard_normal_log_density(values: &[f64]) -> f64 {
    -0.5 * values.iter().map(|v| v * v).sum::<f64>() - 0.5 * values.len() as f64 * LN_2PI
}

/// Result of drawing `v ~ q′(v | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub v: ContinuousRep,
    /// Gaussian draws made, accepted or not.
    pub attempts: usize,
    /// Positions that exhausted `max_attempts` and fell back to `e_{x_i}`.
    pub fallbacks: usize,
}

/// Rejection sampler for the constrained variational distribution: each
/// row is drawn from `N(e_{x_i}, σ²I)` until it maps back to `x_i`.
pub fn sample_v<R: Rng + ?Sized>(
    x: &TokenSequence,
    sigma: f64,
    table: &EmbeddingTable,
    max_attempts: usize,
    rng: &mut R,
) -> Result<SampleOutcome> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    x.validate(table.vocab_size())?;
    let f = table.embed_dim();
    let mut v = ContinuousRep::zeros(x.len(), f);
    let mut attempts = 0;
    let mut fallbacks = 0;
    let mut draw = vec![0.0; f];
    for (i, &token) in x.tokens().iter().enumerate() {
        let center = table.row(token);
        let mut accepted = false;
        for _ in 0..max_attempts {
            attempts += 1;
            for (d, c) in draw.iter_mut().zip(center) {
                *d = c + sigma * rng::standard_normal(rng);
            }
            if matches!(table.nearest_token(&draw), Ok(t) if t == token) {
                accepted = true;
                break;
            }
        }
        if accepted {
            v.row_mut(i).copy_from_slice(&draw);
        } else {
            fallbacks += 1;
            v.row_mut(i).copy_from_slice(center);
        }
    }
    Ok(SampleOutcome { v, attempts, fallbacks })
}

/// Anything that maps token sequences to latents and back.
pub trait SequenceCodec {
    fn encode(&self, x: &TokenSequence) -> Result<LatentSeq>;
    fn decode(&self, z: &LatentSeq) -> Result<TokenSequence>;
}

/// The flow paired with its embedding table.
#[derive(Clone, Copy, Debug)]
pub struct SeqFlow<'a> {
    pub model: &'a FlowModel,
    pub table: &'a EmbeddingTable,
}

impl<'a> SeqFlow<'a> {
    pub fn new(model: &'a FlowModel, table: &'a EmbeddingTable) -> Self {
        Self { model, table }
    }
}

impl SequenceCodec for SeqFlow<'_> {
    /// `normalize(embed(x)).z`.
    fn encode(&self, x: &TokenSequence) -> Result<LatentSeq> {
        let v = self.table.embed_sequence(x)?;
        Ok(self.model.normalize(&v)?.0)
    }

    /// `map_to_tokens(generate(z))`.
    fn decode(&self, z: &LatentSeq) -> Result<TokenSequence> {
        let v = self.model.generate(z)?;
        self.table.map_to_tokens(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::PAD;

    fn small(l: usize, f: usize) -> FlowConfig {
        FlowConfig {
            n_blocks: 2,
            layers_per_block: 2,
            embed_dim: f,
            context_dim: 5,
            hidden_dim: 7,
            seq_len: l,
            vocab_size: 6,
            s_max: 5.0,
            init_scale: 0.1,
        }
    }

    fn random_latent(l: usize, f: usize, rng: &mut rng::FlowRng) -> LatentSeq {
        let mut z = LatentSeq::zeros(l, f);
        rng::fill_standard_normal(rng, z.as_mut_slice());
        z
    }

    #[test]
    fn identity_model() {
        let m = FlowModel::identity(small(3, 4)).unwrap();
        let mut rng = rng::seeded(0);
        let v = ContinuousRep(random_latent(3, 4, &mut rng).0);
        let (z, ld) = m.normalize(&v).unwrap();
        assert_eq!(z.0, v.0);
        assert_eq!(ld, 0.0);
        assert_eq!(m.generate(&z).unwrap(), v);
    }

    #[test]
    fn log_prob_at_origin() {
        let cfg = FlowConfig {
            embed_dim: 2,
            seq_len: 1,
            ..small(1, 2)
        };
        let m = FlowModel::identity(cfg).unwrap();
        let lp = m.log_prob_v(&ContinuousRep::zeros(1, 2)).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let v = ContinuousRep::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let expected = -0.5 * (0.25 + 2.25) - LN_2PI;
        assert!((m.log_prob_v(&v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_layer_end_to_end_matches_hand_case() {
        let cfg = FlowConfig {
            n_blocks: 1,
            layers_per_block: 1,
            embed_dim: 2,
            context_dim: 1,
            hidden_dim: 3,
            seq_len: 1,
            ..small(1, 2)
        };
        let mut m = FlowModel::identity(cfg).unwrap();
        m.blocks[0].layers[0].net.b2 = vec![5.0 * (0.5f64 / 5.0).atanh(), 1.0];
        let v = ContinuousRep::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (z, ld) = m.normalize(&v).unwrap();
        assert!((z.row(0)[1] - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert!((ld + 0.5).abs() < 1e-12);
        let z_hand = LatentSeq::from_rows(&[vec![1.0, 0.606531]]).unwrap();
        assert!((m.generate(&z_hand).unwrap().row(0)[1] - 2.0).abs() < 2e-6);
    }

    #[test]
    fn round_trips_on_random_models() {
        let mut rng = rng::seeded(5);
        for _ in 0..5 {
            let m = FlowModel::random(small(4, 4), 0.5, &mut rng).unwrap();
            let z = random_latent(4, 4, &mut rng);
            let v = m.generate(&z).unwrap();
            let (z2, _) = m.normalize(&v).unwrap();
            assert!(z.max_abs_diff(&z2) < 1e-9);
        }
    }

    #[test]
    fn generation_is_causal_and_incremental() {
        let mut rng = rng::seeded(8);
        let m = FlowModel::random(small(5, 3), 0.5, &mut rng).unwrap();
        let z = random_latent(5, 3, &mut rng);
        let v = m.generate(&z).unwrap();
        let mut gen = m.generator();
        for i in 0..5 {
            let row = gen.push(z.row(i));
            for (a, b) in row.iter().zip(v.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for j in 0..5 {
            let mut z2 = z.clone();
            z2.row_mut(j)[0] += 1.0;
            let v2 = m.generate(&z2).unwrap();
            for i in 0..j {
                assert_eq!(v.row(i), v2.row(i));
            }
            assert_ne!(v.row(j), v2.row(j));
        }
    }

    #[test]
    fn encode_decode_exact() {
        let mut rng = rng::seeded(13);
        let cfg = small(6, 4);
        let m = FlowModel::random(cfg.clone(), 0.6, &mut rng).unwrap();
        let table = EmbeddingTable::build(6, 4, 2).unwrap();
        let codec = SeqFlow::new(&m, &table);
        let mut seen = Vec::new();
        for _ in 0..200 {
            let x = TokenSequence::new((0..6).map(|_| rng.random_range(0..6)).collect());
            let z = codec.encode(&x).unwrap();
            assert_eq!(codec.decode(&z).unwrap(), x);
            seen.push((x, z));
        }
        for (a, b) in seen.iter().zip(seen.iter().skip(1)) {
            if a.0 != b.0 {
                assert_ne!(a.1, b.1);
            }
        }
        let z = random_latent(6, 4, &mut rng);
        let x = codec.decode(&z).unwrap();
        assert!(x.validate(6).is_ok());
        assert!(x.tokens().iter().all(|&t| t < 6 || t == PAD));
    }

    #[test]
    fn sampler_always_accepts_own_token() {
        let table = EmbeddingTable::build(5, 3, 1).unwrap();
        let mut rng = rng::seeded(2);
        let x = TokenSequence::new(vec![1, 4, 0, 2]);
        for _ in 0..200 {
            let out = sample_v(&x, 0.5, &table, 100, &mut rng).unwrap();
            assert_eq!(table.map_to_tokens(&out.v).unwrap(), x);
        }
        let tight = sample_v(&x, 1e-8, &table, 100, &mut rng).unwrap();
        assert_eq!(tight.attempts, 4);
        assert!(tight.v.max_abs_diff(&table.embed_sequence(&x).unwrap()) < 1e-6);
        assert!(sample_v(&x, 0.0, &table, 100, &mut rng).is_err());
    }

    #[test]
    fn sampler_falls_back_after_max_attempts() {
        let table = EmbeddingTable::build(5, 3, 1).unwrap();
        let mut rng = rng::seeded(2);
        let x = TokenSequence::new(vec![3, 3]);
        let out = sample_v(&x, 1e3, &table, 1, &mut rng).unwrap();
        assert!(out.fallbacks <= 2);
        assert_eq!(table.map_to_tokens(&out.v).unwrap(), x);
        let none = sample_v(&x, 1.0, &table, 0, &mut rng).unwrap();
        assert_eq!(none.fallbacks, 2);
        assert_eq!(none.v, table.embed_sequence(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng::seeded(4);
        let m = FlowModel::random(small(3, 4), 0.3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.bin");
        m.save(&p).unwrap();
        let back = FlowModel::load(&p).unwrap();
        assert_eq!(m, back);
        let mut bits_a = Vec::new();
        m.visit_params(|_, p| bits_a.extend(p.iter().map(|v| v.to_bits())));
        let mut bits_b = Vec::new();
        back.visit_params(|_, p| bits_b.extend(p.iter().map(|v| v.to_bits())));
        assert_eq!(bits_a, bits_b);
        std::fs::write(&p, b"garbage!").unwrap();
        assert!(FlowModel::load(&p).is_err());
    }
}

//! Token vocabulary, the unit-norm embedding table, and the deterministic
//! map between continuous rows and token indices.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::ContinuousRep;
use crate::rng;

/// Index of the padding token. Line 0 of every vocabulary file.
pub const PAD: usize = 0;

const EMBEDDING_MAGIC: &[u8; 8] = b"FBOEMB01";

/// A fixed-length sequence of token indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Right-pads with [`PAD`] up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        if self.0.len() < len {
            self.0.resize(len, PAD);
        }
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (position, &index) in self.0.iter().enumerate() {
            if index >= vocab_size {
                return Err(Error::TokenIndex {
                    index,
                    vocab_size,
                    position,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// The set of token embeddings `e_j`, one unit-norm row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab_size: usize,
    embed_dim: usize,
    embeddings: Vec<f64>,
}

impl EmbeddingTable {
    /// Draws i.i.d. standard-normal rows and L2-normalizes them.
    pub fn build(vocab_size: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        check_dims(vocab_size, embed_dim)?;
        let mut rng = rng::seeded(seed);
        let mut embeddings = vec![0.0; vocab_size * embed_dim];
        for row in embeddings.chunks_exact_mut(embed_dim) {
            // A zero draw has probability zero; redraw anyway so the row is normalizable.
            loop {
                rng::fill_standard_normal(&mut rng, row);
                if norm(row) > 1e-12 {
                    break;
                }
            }
        }
        let mut table = Self {
            vocab_size,
            embed_dim,
            embeddings,
        };
        table.renormalize();
        Ok(table)
    }

    /// Builds a table from explicit rows, normalizing each to unit length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let vocab_size = rows.len();
        let embed_dim = rows.first().map_or(0, Vec::len);
        check_dims(vocab_size, embed_dim)?;
        let mut embeddings = Vec::with_capacity(vocab_size * embed_dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != embed_dim {
                return Err(Error::Shape {
                    expected: format!("{embed_dim} columns"),
                    got: format!("{} columns in row {i}", r.len()),
                });
            }
            if norm(r) == 0.0 {
                return Err(Error::Degenerate { position: i });
            }
            embeddings.extend_from_slice(r);
        }
        let mut table = Self {
            vocab_size,
            embed_dim,
            embeddings,
        };
        table.renormalize();
        Ok(table)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.embed_dim..(token + 1) * self.embed_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.embeddings
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.embeddings
    }

    /// Projects every row back onto the unit sphere.
    pub fn renormalize(&mut self) {
        for row in self.embeddings.chunks_exact_mut(self.embed_dim) {
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Index of the embedding with the highest cosine similarity to `v`.
    /// Ties go to the lowest index.
    pub fn nearest_token(&self, v: &[f64]) -> Result<usize> {
        self.nearest_token_at(v, 0)
    }

    fn nearest_token_at(&self, v: &[f64], position: usize) -> Result<usize> {
        if v.len() != self.embed_dim {
            return Err(Error::Shape {
                expected: format!("{}-vector", self.embed_dim),
                got: format!("{}-vector", v.len()),
            });
        }
        // Rows are unit norm, so ranking by dot product equals ranking by cosine.
        if norm(v) == 0.0 {
            return Err(Error::Degenerate { position });
        }
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for j in 0..self.vocab_size {
            let d = dot(v, self.row(j));
            if d > best_dot {
                best_dot = d;
                best = j;
            }
        }
        Ok(best)
    }

    /// Row `i` of the result is `e_{x_i}`.
    pub fn embed_sequence(&self, x: &TokenSequence) -> Result<ContinuousRep> {
        x.validate(self.vocab_size)?;
        let mut out = ContinuousRep::zeros(x.len(), self.embed_dim);
        for (i, &t) in x.tokens().iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(t));
        }
        Ok(out)
    }

    /// Position-wise [`nearest_token`](Self::nearest_token).
    pub fn map_to_tokens(&self, v: &ContinuousRep) -> Result<TokenSequence> {
        v.iter_rows()
            .enumerate()
            .map(|(i, row)| self.nearest_token_at(row, i))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(EMBEDDING_MAGIC);
        w.u64(self.vocab_size as u64);
        w.u64(self.embed_dim as u64);
        w.f64s(&self.embeddings);
        binio::write_file(path, &w.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = Reader::new(path, &bytes, EMBEDDING_MAGIC)?;
        let vocab_size = r.usize()?;
        let embed_dim = r.usize()?;
        check_dims(vocab_size, embed_dim)?;
        let embeddings = r.f64s(vocab_size * embed_dim)?;
        r.finish()?;
        Ok(Self {
            vocab_size,
            embed_dim,
            embeddings,
        })
    }
}

fn check_dims(vocab_size: usize, embed_dim: usize) -> Result<()> {
    if vocab_size < 2 {
        return Err(Error::Config(format!(
            "vocab_size must be at least 2, got {vocab_size}"
        )));
    }
    if embed_dim < 2 {
        return Err(Error::Config(format!(
            "embed_dim must be at least 2, got {embed_dim}"
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Token strings, one per line in the vocabulary file. Line 0 is PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs a PAD token and at least one other token, got {} entries",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "vocabulary entry {i} {t:?} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(|l| l.trim().to_string()).collect();
        Self::new(tokens).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Parses a whitespace-separated line of token strings.
    pub fn parse_line(&self, line: &str) -> Result<TokenSequence> {
        line.split_whitespace()
            .map(|t| {
                self.lookup(t)
                    .ok_or_else(|| Error::Config(format!("unknown token {t:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn render(&self, x: &TokenSequence) -> String {
        x.tokens()
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.token(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Reads a corpus file: one sequence per line, whitespace-separated tokens.
/// Blank lines are skipped. Sequences are right-padded to the longest one
/// (or to `seq_len` when given).
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    seq_len: Option<usize>,
) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seqs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let x = vocab
            .parse_line(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        seqs.push(x);
    }
    if seqs.is_empty() {
        return Err(Error::format(path, "corpus contains no sequences"));
    }
    let longest = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    let len = match seq_len {
        Some(l) if l < longest => {
            return Err(Error::format(
                path,
                format!("sequence of length {longest} exceeds seq_len {l}"),
            ))
        }
        Some(l) => l,
        None => longest,
    };
    Ok(seqs.into_iter().map(|x| x.padded(len)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axis_table() -> EmbeddingTable {
        // Token 0 is PAD, pointing away from both axes so it never wins below.
        EmbeddingTable::from_rows(&[vec![-1.0, -1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn build_is_unit_norm_and_seeded() {
        let a = EmbeddingTable::build(2, 2, 7).unwrap();
        let b = EmbeddingTable::build(2, 2, 7).unwrap();
        assert_eq!(a, b);
        for j in 0..a.vocab_size() {
            assert!((norm(a.row(j)) - 1.0).abs() < 1e-9);
        }
        let c = EmbeddingTable::build(4, 8, 1).unwrap();
        let d = EmbeddingTable::build(4, 8, 2).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn build_rejects_small_dims() {
        assert!(matches!(EmbeddingTable::build(1, 4, 0), Err(Error::Config(_))));
        assert!(matches!(EmbeddingTable::build(4, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rows_are_distinct() {
        let t = EmbeddingTable::build(32, 8, 3).unwrap();
        for i in 0..32 {
            for j in (i + 1)..32 {
                assert!(cosine(t.row(i), t.row(j)) < 1.0);
            }
        }
    }

    #[test]
    fn nearest_token_cases() {
        let t = axis_table();
        assert_eq!(t.nearest_token(&[0.8, 0.6]).unwrap(), 1);
        assert_eq!(t.nearest_token(&[0.0, 1.0]).unwrap(), 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(t.nearest_token(&[h, h]).unwrap(), 1);
        assert!(matches!(
            t.nearest_token(&[0.0, 0.0]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn embed_and_map() {
        let t = axis_table();
        let v = t.embed_sequence(&TokenSequence::new(vec![1, 1])).unwrap();
        assert_eq!(v.row(0), &[1.0, 0.0]);
        assert_eq!(v.row(1), &[1.0, 0.0]);
        assert_eq!(
            t.embed_sequence(&TokenSequence::new(vec![2])).unwrap().row(0),
            &[0.0, 1.0]
        );
        assert!(matches!(
            t.embed_sequence(&TokenSequence::new(vec![3])),
            Err(Error::TokenIndex { index: 3, .. })
        ));
        let empty = ContinuousRep::zeros(0, 2);
        assert!(t.map_to_tokens(&empty).unwrap().is_empty());
    }

    #[test]
    fn map_reports_degenerate_position() {
        let t = axis_table();
        let v = ContinuousRep::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            t.map_to_tokens(&v),
            Err(Error::Degenerate { position: 1 })
        ));
    }

    #[test]
    fn perturbation_inside_margin_keeps_tokens() {
        let t = EmbeddingTable::build(6, 4, 11).unwrap();
        let x = TokenSequence::new(vec![3, 1, 2]);
        let mut v = t.embed_sequence(&x).unwrap();
        // Margin between the own embedding (cos = 1) and the runner-up.
        let own = t.row(1);
        let runner_up = (0..6)
            .filter(|&j| j != 1)
            .map(|j| dot(own, t.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        // A perturbation of norm δ moves every dot product by at most δ, so
        // δ < (1 - runner_up) / 2 cannot change the winner.
        let delta = 0.49 * (1.0 - runner_up);
        let dir = [0.5, -0.5, 0.5, -0.5];
        for (a, d) in v.row_mut(1).iter_mut().zip(dir) {
            *a += delta * d;
        }
        assert_eq!(t.map_to_tokens(&v).unwrap(), x);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let t = EmbeddingTable::build(9, 5, 42).unwrap();
        t.save(&path).unwrap();
        let back = EmbeddingTable::load(&path).unwrap();
        assert_eq!(
            t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn vocabulary_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\nA\nB\nC\n").unwrap();
        let v = Vocabulary::load(&path).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.lookup("<pad>"), Some(PAD));
        assert_eq!(v.parse_line("C A").unwrap().tokens(), &[3, 1]);
        assert!(v.parse_line("D").is_err());
        std::fs::write(&path, "<pad>\nA\nA\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    #[test]
    fn corpus_pads_to_longest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "A B C\n\nB\n").unwrap();
        let vocab = Vocabulary::new(vec!["_".into(), "A".into(), "B".into(), "C".into()]).unwrap();
        let c = load_corpus(&path, &vocab, None).unwrap();
        assert_eq!(c[1].tokens(), &[2, PAD, PAD]);
        assert!(load_corpus(&path, &vocab, Some(2)).is_err());
    }

    proptest! {
        #[test]
        fn embed_then_map_is_identity(tokens in prop::collection::vec(0usize..12, 0..20), seed in 0u64..1000) {
            let t = EmbeddingTable::build(12, 6, seed).unwrap();
            let x = TokenSequence::new(tokens);
            prop_assert_eq!(t.map_to_tokens(&t.embed_sequence(&x).unwrap()).unwrap(), x);
        }

        #[test]
        fn nearest_token_is_scale_invariant(v in prop::collection::vec(-3.0f64..3.0, 5), c in 1e-3f64..1e3) {
            prop_assume!(norm(&v) > 1e-6);
            let t = EmbeddingTable::build(10, 5, 5).unwrap();
            let scaled: Vec<f64> = v.iter().map(|a| a * c).collect();
            let a = t.nearest_token(&v).unwrap();
            prop_assert_eq!(a, t.nearest_token(&scaled).unwrap());
            prop_assert_eq!(a, t.nearest_token(&v).unwrap());
        }
    }
}

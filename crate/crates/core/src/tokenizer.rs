//! Text to token indices to embedding rows, plus rotary position embedding.
//!
//! Tokenization is greedy longest-match over a fixed vocabulary: at each
//! position the longest vocabulary entry of at most `max_len` characters is
//! taken. With a character vocabulary and `max_len = 2` this gives
//! "at most two characters" tokenization; with a word vocabulary and
//! whitespace pre-splitting it gives word tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

/// Ordered set of distinct, nonempty token strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Argument(format!("vocabulary entry {i} is empty")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Length in characters of the longest entry.
    pub fn max_token_chars(&self) -> usize {
        self.tokens
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(0)
    }

    /// Concatenation of the tokens behind `indices`.
    pub fn detokenize(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| {
                self.token(i).ok_or(Error::Lookup {
                    index: i,
                    size: self.len(),
                })
            })
            .collect()
    }
}

/// Lowercases and collapses every whitespace run to a single space,
/// trimming both ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Greedy longest-match tokenization of the normalized text. Spaces are
/// ordinary characters here and must be in the vocabulary if present.
pub fn tokenize_greedy(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    let chars: Vec<char> = normalize(text).chars().collect();
    let mut out = Vec::new();
    greedy_into(&chars, 0, vocab, max_len, &mut out)?;
    Ok(out)
}

/// Splits the normalized text on whitespace, then tokenizes every word
/// greedily. Error positions refer to the normalized text.
pub fn tokenize_words(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    let normalized = normalize(text);
    let chars: Vec<char> = normalized.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for word in normalized.split(' ').filter(|w| !w.is_empty()) {
        let len = word.chars().count();
        greedy_into(&chars[start..start + len], start, vocab, max_len, &mut out)?;
        start += len + 1;
    }
    Ok(out)
}

fn greedy_into(
    chars: &[char],
    offset: usize,
    vocab: &Vocabulary,
    max_len: usize,
    out: &mut Vec<usize>,
) -> Result<()> {
    if max_len == 0 && !chars.is_empty() {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    let mut pos = 0;
    let mut buf = String::new();
    while pos < chars.len() {
        let longest = max_len.min(chars.len() - pos);
        let hit = (1..=longest).rev().find_map(|len| {
            buf.clear();
            buf.extend(&chars[pos..pos + len]);
            vocab.index_of(&buf).map(|idx| (idx, len))
        });
        match hit {
            Some((idx, len)) => {
                out.push(idx);
                pos += len;
            }
            None => {
                return Err(Error::UnknownSymbol {
                    symbol: chars[pos],
                    position: offset + pos,
                })
            }
        }
    }
    Ok(())
}

/// Embedding matrix `E` with one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Matrix,
}

impl EmbeddingTable {
    pub fn new(matrix: Matrix, vocab_size: usize) -> Result<Self> {
        if matrix.rows() != vocab_size {
            return Err(shape_err(
                "EmbeddingTable::new",
                matrix.shape_str(),
                format!("vocabulary of size {vocab_size}"),
            ));
        }
        Ok(EmbeddingTable { matrix })
    }

    /// Rows drawn uniformly from `[-1, 1)` with a seeded generator.
    pub fn seeded(vocab_size: usize, dim: usize, seed: u64) -> Self {
        EmbeddingTable {
            matrix: SeededRng::new(seed).uniform_matrix(vocab_size, dim),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Stacks the embedding rows for `indices`; `[]` gives a `0 x d` matrix.
pub fn embed(indices: &[usize], table: &EmbeddingTable) -> Result<Matrix> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= table.vocab_size()) {
        return Err(Error::Lookup {
            index: bad,
            size: table.vocab_size(),
        });
    }
    Ok(table.matrix.select_rows(indices))
}

/// On-disk vocabulary plus embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: Vec<String>,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl VocabFile {
    pub fn build(&self) -> Result<(Vocabulary, EmbeddingTable)> {
        let vocab = Vocabulary::new(self.tokens.iter().cloned())?;
        let table = match (&self.rows, self.seed) {
            (Some(rows), _) => {
                let m = if rows.is_empty() {
                    Matrix::zeros(0, self.dim)
                } else {
                    Matrix::from_rows(rows)?
                };
                if m.cols() != self.dim {
                    return Err(shape_err(
                        "VocabFile",
                        m.shape_str(),
                        format!("dim {}", self.dim),
                    ));
                }
                EmbeddingTable::new(m, vocab.len())?
            }
            (None, Some(seed)) => EmbeddingTable::seeded(vocab.len(), self.dim, seed),
            (None, None) => {
                return Err(Error::Format(
                    "vocabulary file needs either \"rows\" or \"seed\"".into(),
                ))
            }
        };
        Ok((vocab, table))
    }
}

pub fn load_vocab_json(json: &str) -> Result<(Vocabulary, EmbeddingTable)> {
    let file: VocabFile = serde_json::from_str(json).map_err(|e| Error::Format(e.to_string()))?;
    file.build()
}

/// Rotary position embedding: coordinate pair `(2k, 2k+1)` of a row at
/// position `p` is rotated by `p * base^(-2k / head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
}

impl RopeParams {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "RoPE head_dim {head_dim} must be even"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Argument(format!(
                "RoPE base {base} must be positive"
            )));
        }
        Ok(RopeParams { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, Self::DEFAULT_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angular frequency of pair `k`.
    pub fn theta(&self, k: usize) -> f64 {
        self.base.powf(-2.0 * k as f64 / self.head_dim as f64)
    }
}

/// Rotates row `t` of `m` by `R_{start_pos + t}`.
pub fn apply_rope(m: &Matrix, start_pos: usize, params: &RopeParams) -> Result<Matrix> {
    if !m.cols().is_multiple_of(2) {
        return Err(shape_err(
            "apply_rope",
            m.shape_str(),
            "an even column count",
        ));
    }
    if m.cols() != params.head_dim {
        return Err(shape_err(
            "apply_rope",
            m.shape_str(),
            format!("head_dim {}", params.head_dim),
        ));
    }
    let thetas: Vec<f64> = (0..m.cols() / 2).map(|k| params.theta(k)).collect();
    let mut t = 0usize;
    m.map_rows(|row| {
        let pos = (start_pos + t) as f64;
        t += 1;
        let mut out = row.to_vec();
        for (k, theta) in thetas.iter().enumerate() {
            let (sin, cos) = (pos * theta).sin_cos();
            let (x, y) = (row[2 * k], row[2 * k + 1]);
            out[2 * k] = x * cos - y * sin;
            out[2 * k + 1] = x * sin + y * cos;
        }
        out
    })
}

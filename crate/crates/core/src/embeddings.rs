//! Token vocabulary and the frozen embedding table.
//!
//! Every token maps to `[word_part ; ngram_part]`. The word part comes from a
//! pretrained vector file when the token is in the vocabulary and from
//! signed feature hashing otherwise. The n-gram part always uses hashed
//! character 3- and 4-grams, so unseen tokens (proper names, new slot
//! values) still get informative, deterministic vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";

const WORD_SALT: u64 = 0x5eed_0001;
const NGRAM_SALT: u64 = 0x5eed_0002;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} values for token {token:?}, found {found}")]
    Dimension {
        line: usize,
        token: String,
        expected: usize,
        found: usize,
    },
    #[error("value {0:?} contains no tokens")]
    EmptyValue(String),
}

/// Lowercases, turns every character that is neither alphanumeric nor an
/// apostrophe into a space, and splits on whitespace. Fragments without any
/// alphanumeric character are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the padding token at index 0.
    pub fn new() -> Self {
        let mut vocab = Self {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        vocab.insert(PAD_TOKEN);
        vocab
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::new();
        for t in tokens {
            vocab.insert(t.as_ref());
        }
        vocab
    }

    /// Returns the index of `token`, inserting it if absent.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Vectors read from a pretrained text file.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: IndexMap<String, Vec<f64>>,
    pub loaded: usize,
    pub malformed_skipped: usize,
    pub duplicates: usize,
}

/// Reads `token f1 f2 ... fd` lines. A wrong value count is an error; lines
/// whose numbers do not parse as finite floats, and a leading
/// `count dim` header, are skipped and counted. The last duplicate wins.
pub fn load_word_vectors(path: &Path, expected_dim: usize) -> Result<WordVectors, EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut out = WordVectors {
        dim: expected_dim,
        ..WordVectors::default()
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = i + 1;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if line_no == 1 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            out.malformed_skipped += 1;
            continue;
        }
        if rest.len() != expected_dim {
            return Err(EmbeddingError::Dimension {
                line: line_no,
                token: token.to_owned(),
                expected: expected_dim,
                found: rest.len(),
            });
        }
        let parsed: Option<Vec<f64>> = rest
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let Some(values) = parsed else {
            log::warn!("{}:{line_no}: skipping malformed vector for {token:?}", path.display());
            out.malformed_skipped += 1;
            continue;
        };
        if out.vectors.insert(token.to_owned(), values).is_some() {
            out.duplicates += 1;
        } else {
            out.loaded += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub word_dim: usize,
    pub ngram_dim: usize,
    pub hash_seed: u64,
}

impl EmbeddingConfig {
    pub fn dim(&self) -> usize {
        self.word_dim + self.ngram_dim
    }
}

/// Finalized, immutable embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    config: EmbeddingConfig,
    vocab: Vocabulary,
    /// `|vocab| × word_dim`, row 0 (padding) is zero.
    word_part: Vec<f64>,
}

impl EmbeddingTable {
    /// A table with no pretrained vectors: every word part is hashed.
    pub fn hashed(config: EmbeddingConfig) -> Self {
        Self {
            config,
            vocab: Vocabulary::new(),
            word_part: vec![0.0; config.word_dim],
        }
    }

    /// Builds a table from pretrained vectors. When `keep` is given only those
    /// tokens are retained, which keeps checkpoints small.
    pub fn from_word_vectors(
        config: EmbeddingConfig,
        vectors: &WordVectors,
        keep: Option<&dyn Fn(&str) -> bool>,
    ) -> Result<Self, EmbeddingError> {
        if vectors.dim != config.word_dim {
            return Err(EmbeddingError::Dimension {
                line: 0,
                token: String::new(),
                expected: config.word_dim,
                found: vectors.dim,
            });
        }
        let mut table = Self::hashed(config);
        for (token, v) in &vectors.vectors {
            if token == PAD_TOKEN || keep.is_some_and(|k| !k(token)) {
                continue;
            }
            table.vocab.insert(token);
            table.word_part.extend_from_slice(v);
        }
        Ok(table)
    }

    /// Reassembles a table from checkpointed parts.
    pub fn from_parts(
        config: EmbeddingConfig,
        vocab: Vocabulary,
        word_part: Vec<f64>,
    ) -> Result<Self, EmbeddingError> {
        if word_part.len() != vocab.len() * config.word_dim || vocab.token(0) != Some(PAD_TOKEN) {
            return Err(EmbeddingError::Dimension {
                line: 0,
                token: PAD_TOKEN.to_owned(),
                expected: vocab.len() * config.word_dim,
                found: word_part.len(),
            });
        }
        Ok(Self {
            config,
            vocab,
            word_part,
        })
    }

    pub fn config(&self) -> EmbeddingConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn word_part_matrix(&self) -> &[f64] {
        &self.word_part
    }

    pub fn word_part(&self, token: &str) -> Vec<f64> {
        let d = self.config.word_dim;
        match self.vocab.get(token) {
            Some(i) => self.word_part[i * d..(i + 1) * d].to_vec(),
            None => {
                let mut feats = char_ngrams(token);
                feats.push(format!("#{token}"));
                hashed_vector(&feats, d, self.config.hash_seed ^ WORD_SALT)
            }
        }
    }

    pub fn ngram_part(&self, token: &str) -> Vec<f64> {
        if token == PAD_TOKEN {
            return vec![0.0; self.config.ngram_dim];
        }
        hashed_vector(
            &char_ngrams(token),
            self.config.ngram_dim,
            self.config.hash_seed ^ NGRAM_SALT,
        )
    }

    /// `[word_part ; ngram_part]`, total for any token.
    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        let mut v = self.word_part(token);
        v.extend(self.ngram_part(token));
        v
    }

    /// Sum of the token embeddings of a (possibly multi-word) value.
    pub fn embed_value(&self, value: &str) -> Result<Vec<f64>, EmbeddingError> {
        let tokens = tokenize(value);
        let mut iter = tokens.iter();
        let first = iter
            .next()
            .ok_or_else(|| EmbeddingError::EmptyValue(value.to_owned()))?;
        let mut acc = self.embed_token(first);
        for t in iter {
            for (a, b) in acc.iter_mut().zip(self.embed_token(t)) {
                *a += b;
            }
        }
        Ok(acc)
    }
}

/// Character 3- and 4-grams of `<token>`.
fn char_ngrams(token: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut out = Vec::new();
    for n in [3usize, 4] {
        if chars.len() < n {
            continue;
        }
        out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
    }
    out
}

/// 64-bit FNV-1a over the seed bytes followed by the feature bytes.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    // final avalanche so low bits depend on every input byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Sum of signed one-hot bucket vectors, scaled to unit length.
fn hashed_vector(features: &[String], dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if features.is_empty() || dim == 0 {
        return v;
    }
    for f in features {
        let h = fnv1a(seed, f.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

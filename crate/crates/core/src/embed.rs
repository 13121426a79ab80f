//! Deterministic text embeddings.
//!
//! Tokens are hashed into unit vectors and averaged. Averaging alone is
//! blind to word order, so texts with two or more tokens also get an
//! order-sensitivity channel: the mean of hashed bigram vectors is added to
//! the last `d / 4` coordinates, and the result is rescaled back into the
//! unit ball. Real encoder outputs can be supplied through a precomputed
//! embedding file instead.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const DEFAULT_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedSource {
    DeterministicHash,
    PrecomputedFile(PathBuf),
}

/// Pooling over token vectors. Only averaging is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub source: EmbedSource,
    /// Mix hashed bigrams into the tail coordinates.
    pub order_channel: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dim: DEFAULT_DIM,
            seed: 0,
            pooling: Pooling::Avg,
            source: EmbedSource::DeterministicHash,
            order_channel: true,
        }
    }
}

/// Lowercases and strips leading/trailing punctuation. Returns `None` when
/// nothing is left.
pub fn normalize_token(raw: &str) -> Option<String> {
    let t = raw
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase();
    (!t.is_empty()).then_some(t)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}

fn hashed_unit(bytes: &[u8], dim: usize, seed: u64, stream: Stream) -> Vec<f64> {
    let digest = Sha256::digest(bytes);
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut r = rng::keyed(seed, stream, &[key, dim as u64]);
    let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Unit-norm vector that is a pure function of `(token, dim, seed)`.
pub fn embed_token(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    debug_assert!(!token.is_empty());
    hashed_unit(token.as_bytes(), dim, seed, Stream::TokenEmbedding)
}

fn mean_into(acc: &mut [f64], vectors: impl Iterator<Item = Vec<f64>>) {
    let mut count = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    if count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
}

/// Average-pooled hash embedding of `text`; the zero vector for texts with
/// no tokens.
pub fn embed_text(text: &str, config: &EmbedderConfig) -> Vec<f64> {
    let d = config.dim;
    let tokens = tokenize(text);
    let mut out = vec![0.0; d];
    mean_into(&mut out, tokens.iter().map(|t| embed_token(t, d, config.seed)));
    let k = d / 4;
    if config.order_channel && k > 0 && tokens.len() >= 2 {
        let mut bigrams = vec![0.0; k];
        mean_into(
            &mut bigrams,
            tokens.windows(2).map(|w| {
                let joined = format!("{}\u{1f}{}", w[0], w[1]);
                hashed_unit(joined.as_bytes(), k, config.seed, Stream::BigramEmbedding)
            }),
        );
        for (o, b) in out[d - k..].iter_mut().zip(&bigrams) {
            *o += b;
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Vectors read from a precomputed embedding file, keyed by exact text.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Reads a headerless CSV: the text, then `d` floats per row.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<PrecomputedTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut table = PrecomputedTable::default();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
        let text = rec.get(0).unwrap_or("").to_owned();
        let vec: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
        if vec.is_empty() || vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("row {}: no finite vector", i + 1)));
        }
        if table.dim == 0 {
            table.dim = vec.len();
        } else if vec.len() != table.dim {
            return Err(Error::Format(format!(
                "row {} has dimension {}, earlier rows {}",
                i + 1,
                vec.len(),
                table.dim
            )));
        }
        table.vectors.insert(text, vec);
    }
    Ok(table)
}

/// Text-to-vector map with optional precomputed lookups.
#[derive(Debug)]
pub struct Embedder {
    config: EmbedderConfig,
    table: Option<PrecomputedTable>,
    misses: AtomicUsize,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        let table = match &config.source {
            EmbedSource::DeterministicHash => None,
            EmbedSource::PrecomputedFile(path) => {
                let t = load_precomputed(path)?;
                if t.dim != config.dim {
                    return Err(Error::Format(format!(
                        "precomputed dimension {} does not match configured {}",
                        t.dim, config.dim
                    )));
                }
                Some(t)
            }
        };
        Ok(Embedder {
            config,
            table,
            misses: AtomicUsize::new(0),
        })
    }

    pub fn with_table(config: EmbedderConfig, table: PrecomputedTable) -> Result<Self> {
        if table.dim != config.dim {
            return Err(Error::Format(format!(
                "precomputed dimension {} does not match configured {}",
                table.dim, config.dim
            )));
        }
        Ok(Embedder {
            config,
            table: Some(table),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Number of precomputed-table misses served by the hash fallback.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        if let Some(table) = &self.table {
            if let Some(v) = table.vectors.get(text) {
                return v.clone();
            }
            self.misses.fetch_add(1, Ordering::Relaxed);
            log::warn!("no precomputed embedding for {text:?}; using hash fallback");
        }
        embed_text(text, &self.config)
    }
}

//! Interpolated add-k n-gram model over the byte vocabulary.
//!
//! Each order `i` (context length `i - 1`) gives an add-k estimate
//! `(count + k) / (total + k * V)`; the orders are mixed with fixed
//! Jelinek-Mercer weights. Queries are BOS-prefixed, matching training.
//!
//! Persisted as compact JSON:
//!
//! ```text
//! { "format": "cfg-guidance-ngram", "version": 1, "name": str,
//!   "order": n, "k": f64, "lambdas": [f64; n], "vocab_size": 258,
//!   "tables": [                       // one list per order, 1..=n
//!     [ { "context": [id; i-1], "counts": [[id, count], ...] }, ... ]
//!   ] }
//! ```
//!
//! Contexts are sorted lexicographically and counts by token id, so equal
//! models serialize to identical bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LogitVector};
use crate::error::{Error, Result};
use crate::guidance::LogProbs;
use crate::vocab::{TokenId, BOS, EOS, VOCAB_SIZE};

pub const DEFAULT_K: f64 = 0.01;
const FORMAT: &str = "cfg-guidance-ngram";
const VERSION: u32 = 1;
const LAMBDA_TOLERANCE: f64 = 1e-9;

/// Weights proportional to `2^i` for order `i`, normalized.
pub fn default_lambdas(order: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=order).map(|i| 2f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    total: u64,
    /// Sorted by token id.
    counts: Vec<(TokenId, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    name: String,
    order: usize,
    k: f64,
    lambdas: Vec<f64>,
    /// `tables[i]` holds contexts of length `i`.
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

fn check_params(order: usize, k: f64, lambdas: &[f64]) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidConfig(
            "n-gram order must be at least 1".into(),
        ));
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "add-k constant must be positive, got {k}"
        )));
    }
    if lambdas.len() != order {
        return Err(Error::BadLambdas(format!(
            "expected {order} weights, got {}",
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::BadLambdas(format!(
            "weight {l} is negative or not finite"
        )));
    }
    let sum: f64 = lambdas.iter().sum();
    if (sum - 1.0).abs() > LAMBDA_TOLERANCE {
        return Err(Error::BadLambdas(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

impl NGramModel {
    pub fn train(corpus: &[u8], order: usize, k: f64, lambdas: &[f64]) -> Result<Self> {
        check_params(order, k, lambdas)?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seq = Vec::with_capacity(corpus.len() + 1);
        seq.push(BOS);
        seq.extend(corpus.iter().map(|&b| TokenId::from(b)));

        let mut raw: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u64>>> =
            vec![HashMap::new(); order];
        for j in 1..seq.len() {
            let target = seq[j];
            for (m, table) in raw.iter_mut().enumerate() {
                if m > j {
                    break;
                }
                let ctx = &seq[j - m..j];
                let slot = match table.get_mut(ctx) {
                    Some(slot) => slot,
                    None => table.entry(ctx.to_vec()).or_default(),
                };
                *slot.entry(target).or_insert(0) += 1;
            }
        }

        let tables = raw
            .into_iter()
            .map(|table| {
                table
                    .into_iter()
                    .map(|(ctx, counts)| {
                        let mut counts: Vec<(TokenId, u64)> = counts.into_iter().collect();
                        counts.sort_unstable();
                        let total = counts.iter().map(|(_, c)| c).sum();
                        (ctx, ContextCounts { total, counts })
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            name: format!("ngram-{order}"),
            order,
            k,
            lambdas: lambdas.to_vec(),
            tables,
        })
    }

    /// Trains with [`default_lambdas`] and [`DEFAULT_K`].
    pub fn train_default(corpus: &[u8], order: usize) -> Result<Self> {
        Self::train(corpus, order, DEFAULT_K, &default_lambdas(order))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Observed count of `token` after the exact `context` (length < order).
    pub fn count(&self, context: &[TokenId], token: TokenId) -> u64 {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .and_then(|cc| {
                cc.counts
                    .binary_search_by_key(&token, |(t, _)| *t)
                    .ok()
                    .map(|i| cc.counts[i].1)
            })
            .unwrap_or(0)
    }

    /// Number of distinct contexts stored for contexts of length `len`.
    pub fn context_count(&self, len: usize) -> usize {
        self.tables.get(len).map_or(0, HashMap::len)
    }

    /// Interpolated next-token log-probabilities.
    ///
    /// Orders whose context window is longer than the BOS-prefixed context are
    /// dropped and the remaining weights rescaled, so short contexts back off
    /// to lower orders.
    pub fn next_logprobs(&self, context: &[TokenId]) -> LogProbs {
        let v = VOCAB_SIZE as f64;
        let available = (context.len() + 2).min(self.order);
        let weight_total: f64 = self.lambdas[..available].iter().sum();
        let mut probs = vec![0.0f64; VOCAB_SIZE];

        for m in 0..available {
            let lambda = if weight_total > 0.0 {
                self.lambdas[m] / weight_total
            } else {
                // every usable order has zero weight; fall back to the lowest one
                if m == 0 {
                    1.0
                } else {
                    0.0
                }
            };
            if lambda == 0.0 {
                continue;
            }
            let ctx = suffix_with_bos(context, m);
            let (total, counts): (u64, &[(TokenId, u64)]) = match self.tables[m].get(ctx.as_slice())
            {
                Some(cc) => (cc.total, &cc.counts),
                None => (0, &[]),
            };
            let denom = total as f64 + self.k * v;
            let base = lambda * self.k / denom;
            for p in probs.iter_mut() {
                *p += base;
            }
            for &(tok, c) in counts {
                probs[tok as usize] += lambda * c as f64 / denom;
            }
        }

        LogProbs::from_normalized(probs.into_iter().map(f64::ln).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tables = self
            .tables
            .iter()
            .map(|table| {
                let mut rows: Vec<ContextRecord> = table
                    .iter()
                    .map(|(ctx, cc)| ContextRecord {
                        context: ctx.clone(),
                        counts: cc.counts.clone(),
                    })
                    .collect();
                rows.sort_unstable_by(|a, b| a.context.cmp(&b.context));
                rows
            })
            .collect();
        let file = NGramFile {
            format: FORMAT.to_string(),
            version: VERSION,
            name: self.name.clone(),
            order: self.order,
            k: self.k,
            lambdas: self.lambdas.clone(),
            vocab_size: VOCAB_SIZE,
            tables,
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: NGramFile = serde_json::from_slice(bytes)?;
        if file.format != FORMAT {
            return Err(Error::InvalidModel(format!(
                "unknown format tag {:?}",
                file.format
            )));
        }
        if file.version != VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if file.vocab_size != VOCAB_SIZE {
            return Err(Error::InvalidModel(format!(
                "vocabulary size {} != {VOCAB_SIZE}",
                file.vocab_size
            )));
        }
        check_params(file.order, file.k, &file.lambdas)?;
        if file.tables.len() != file.order {
            return Err(Error::InvalidModel(
                "one count table per order is required".into(),
            ));
        }
        let mut tables = Vec::with_capacity(file.order);
        for (m, rows) in file.tables.into_iter().enumerate() {
            let mut table = HashMap::with_capacity(rows.len());
            for mut row in rows {
                if row.context.len() != m {
                    return Err(Error::InvalidModel(format!(
                        "context of length {} in the table for length {m}",
                        row.context.len()
                    )));
                }
                if row
                    .context
                    .iter()
                    .chain(row.counts.iter().map(|(t, _)| t))
                    .any(|&t| t as usize >= VOCAB_SIZE)
                {
                    return Err(Error::InvalidModel("token id out of range".into()));
                }
                row.counts.sort_unstable();
                let total = row.counts.iter().map(|(_, c)| c).sum();
                table.insert(
                    row.context,
                    ContextCounts {
                        total,
                        counts: row.counts,
                    },
                );
            }
            tables.push(table);
        }
        Ok(Self {
            name: file.name,
            order: file.order,
            k: file.k,
            lambdas: file.lambdas,
            tables,
        })
    }
}

/// The last `len` tokens of `[BOS] ++ context`.
fn suffix_with_bos(context: &[TokenId], len: usize) -> Vec<TokenId> {
    if len == 0 {
        return Vec::new();
    }
    if context.len() >= len {
        context[context.len() - len..].to_vec()
    } else {
        let mut v = Vec::with_capacity(len);
        v.push(BOS);
        v.extend_from_slice(context);
        v
    }
}

#[derive(Serialize, Deserialize)]
struct ContextRecord {
    context: Vec<TokenId>,
    counts: Vec<(TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
struct NGramFile {
    format: String,
    version: u32,
    name: String,
    order: usize,
    k: f64,
    lambdas: Vec<f64>,
    vocab_size: usize,
    tables: Vec<Vec<ContextRecord>>,
}

impl LanguageModel for NGramModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "ngram"
    }

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.order - 1)
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(EOS)
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        LogitVector::new(self.next_logprobs(context).into_inner())
    }
}

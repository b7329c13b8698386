//! Explicit conditional-probability tables.
//!
//! Each entry maps an exact context suffix to a full distribution; the longest
//! stored suffix of the query context wins, and anything unmatched falls back
//! to the default distribution. Useful as an exact oracle in tests.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LogitVector};
use crate::error::{Error, Result};
use crate::guidance::LogProbs;
use crate::vocab::TokenId;

const SUM_TOLERANCE: f64 = 1e-12;

/// On-disk form: `{ "order", "default", "entries": [{ "context", "probs" }] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    pub order: usize,
    pub default: Vec<f64>,
    pub entries: Vec<TableEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub context: Vec<TokenId>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TableModel {
    name: String,
    order: usize,
    eos: Option<TokenId>,
    default: Vec<f64>,
    entries: HashMap<Vec<TokenId>, Vec<f64>>,
}

fn check_distribution(probs: &[f64], vocab_size: usize) -> Result<()> {
    if probs.len() != vocab_size {
        return Err(Error::LengthMismatch {
            expected: vocab_size,
            actual: probs.len(),
        });
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidModel(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidModel(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

impl TableModel {
    /// `default` fixes the vocabulary size. `order` bounds the stored
    /// context length.
    pub fn new(order: usize, default: Vec<f64>) -> Result<Self> {
        if default.is_empty() {
            return Err(Error::InvalidModel("default distribution is empty".into()));
        }
        check_distribution(&default, default.len())?;
        Ok(Self {
            name: "table".into(),
            order,
            eos: None,
            default,
            entries: HashMap::new(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_eos(mut self, eos: TokenId) -> Self {
        self.eos = Some(eos);
        self
    }

    pub fn insert(&mut self, context: Vec<TokenId>, probs: Vec<f64>) -> Result<()> {
        if context.len() > self.order {
            return Err(Error::InvalidModel(format!(
                "context of length {} exceeds table order {}",
                context.len(),
                self.order
            )));
        }
        check_distribution(&probs, self.default.len())?;
        self.entries.insert(context, probs);
        Ok(())
    }

    /// Scales nonnegative weights to a distribution before inserting.
    pub fn insert_weights(&mut self, context: Vec<TokenId>, weights: &[f64]) -> Result<()> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidModel(
                "weights must have positive finite mass".into(),
            ));
        }
        self.insert(context, weights.iter().map(|w| w / total).collect())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn default_distribution(&self) -> &[f64] {
        &self.default
    }

    /// The stored distribution for the longest matching suffix of `context`.
    pub fn lookup(&self, context: &[TokenId]) -> &[f64] {
        let longest = self.order.min(context.len());
        (0..=longest)
            .rev()
            .find_map(|len| self.entries.get(&context[context.len() - len..]))
            .map_or(self.default.as_slice(), Vec::as_slice)
    }

    pub fn next_logprobs(&self, context: &[TokenId]) -> LogProbs {
        LogProbs::from_normalized(self.lookup(context).iter().map(|p| p.ln()).collect())
    }

    pub fn from_file(file: TableFile) -> Result<Self> {
        let mut model = Self::new(file.order, file.default)?;
        if let Some(name) = file.name {
            model.name = name;
        }
        if let Some(eos) = file.eos {
            if eos as usize >= model.default.len() {
                return Err(Error::InvalidModel(format!("eos id {eos} out of range")));
            }
            model.eos = Some(eos);
        }
        for entry in file.entries {
            model.insert(entry.context, entry.probs)?;
        }
        Ok(model)
    }

    pub fn to_file(&self) -> TableFile {
        let mut entries: Vec<TableEntry> = self
            .entries
            .iter()
            .map(|(context, probs)| TableEntry {
                context: context.clone(),
                probs: probs.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.context.cmp(&b.context));
        TableFile {
            order: self.order,
            default: self.default.clone(),
            entries,
            name: Some(self.name.clone()),
            eos: self.eos,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: TableFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_file())?)?;
        Ok(())
    }
}

impl LanguageModel for TableModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "table"
    }

    fn vocab_size(&self) -> usize {
        self.default.len()
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.order)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.eos
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        LogitVector::new(self.next_logprobs(context).into_inner())
    }
}

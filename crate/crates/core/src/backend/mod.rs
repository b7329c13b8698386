//! Next-token logit sources.

mod ngram;
mod remote;
mod table;

pub use ngram::{default_lambdas, NGramModel, DEFAULT_K};
pub use remote::{RemoteConfig, RemoteModel};
pub use table::{TableEntry, TableFile, TableModel};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Unnormalized next-token scores, one per vocabulary entry.
///
/// `-inf` marks an impossible token. NaN and `+inf` are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| v.is_nan() || *v == &f64::INFINITY) {
            return Err(Error::BadResponse(format!(
                "logit value {bad} is not allowed"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Anything that can score the next token given a context.
///
/// The built-in n-gram and table backends are deterministic: the same context
/// always yields the same logits.
pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;

    /// Short backend type tag, e.g. `"ngram"`.
    fn kind(&self) -> &'static str;

    fn vocab_size(&self) -> usize;

    /// Longest context the backend looks at, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }

    /// Token that ends generation, if the backend has one.
    fn eos_token(&self) -> Option<TokenId> {
        None
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn max_context(&self) -> Option<usize> {
        (**self).max_context()
    }
    fn eos_token(&self) -> Option<TokenId> {
        (**self).eos_token()
    }
    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(context)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn max_context(&self) -> Option<usize> {
        (**self).max_context()
    }
    fn eos_token(&self) -> Option<TokenId> {
        (**self).eos_token()
    }
    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(context)
    }
}

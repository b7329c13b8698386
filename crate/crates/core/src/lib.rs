//! Classifier-free guidance for autoregressive language models.
//!
//! A prompt-conditioned distribution and a reference distribution (the last
//! prompt token alone, a negative prompt, or a suffix of the prompt) are
//! combined in log space with strength `gamma`:
//!
//! ```text
//! log p_guided = log p_uncond + gamma * (log p_cond - log p_uncond)   (renormalized)
//! ```
//!
//! `gamma = 1` is ordinary conditional decoding; larger values push harder
//! toward what the prompt adds over the reference.
//!
//! The crate ships two deterministic backends (an interpolated byte n-gram
//! model and an explicit probability table) plus an HTTP client for external
//! models, a multiple-choice scoring harness, pass@k, entropy and top-p
//! overlap diagnostics, and a small streaming HTTP service.

pub mod analysis;
pub mod backend;
pub mod cli;
pub mod error;
pub mod guidance;
pub mod registry;
pub mod scoring;
mod serde_logs;
pub mod service;
pub mod vocab;

pub use backend::{LanguageModel, LogitVector, NGramModel, RemoteConfig, RemoteModel, TableModel};
pub use error::{Error, Result};
pub use guidance::{
    generate, guide, init_dual_context, normalize, sample, step, ContextMode, DualContext,
    GenerateOptions, GenerationTrace, GuidanceConfig, LogProbs, SamplerConfig, StepRecord,
    StopReason, Strategy, DEFAULT_NEGATIVE_PROMPT,
};

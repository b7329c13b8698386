//! Classifier-free guidance over two contexts.
//!
//! The conditional context holds the full prompt; the unconditional one holds
//! a reduced or negative prompt. Each step both are scored, the normalized
//! log-distributions are mixed as `uncond + gamma * (cond - uncond)` and
//! renormalized, a token is drawn from the result and appended to both.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{entropy, top_p_overlap, top_p_set, DIAGNOSTIC_TOP_P};
use crate::backend::{LanguageModel, LogitVector};
use crate::error::{Error, Result};
use crate::vocab::{validate, TokenId, TokenSeq};

/// Log-prob assigned to tokens the unconditional model rules out, so that
/// guidance never divides by zero probability.
pub const UNCOND_LOG_FLOOR: f64 = -80.0;

/// Default negative prompt, stored exactly as quoted.
pub const DEFAULT_NEGATIVE_PROMPT: &str = "The prompt below is a question to answer, a task to complete, or a conversation to respond to; decide which and write an appropriate response.";

/// PRNG behind all sampling: xoshiro256++, seeded through SplitMix64.
pub type SamplerRng = Xoshiro256PlusPlus;

pub fn sampler_rng(seed: u64) -> SamplerRng {
    SamplerRng::seed_from_u64(seed)
}

/// A normalized log-distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogProbs(#[serde(with = "crate::serde_logs")] Vec<f64>);

impl LogProbs {
    /// Wraps values the caller already knows to be normalized.
    pub fn from_normalized(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token as usize]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.exp()).collect()
    }

    /// Highest-scoring token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-softmax with max subtraction.
pub fn normalize_values(values: &[f64]) -> Result<LogProbs> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllNegInfinity);
    }
    let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(LogProbs(values.iter().map(|v| v - lse).collect()))
}

pub fn normalize(logits: &LogitVector) -> Result<LogProbs> {
    normalize_values(logits.as_slice())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "guidance strength must be finite and >= 0, got {gamma}"
        )))
    }
}

/// Guided distribution `normalize((1 - gamma) * uncond + gamma * cond)`.
///
/// `gamma = 1` returns `cond` and `gamma = 0` returns `uncond`. A token the
/// conditional model rules out stays ruled out for `gamma > 0`; a token ruled
/// out only by the unconditional model is scored against
/// [`UNCOND_LOG_FLOOR`] instead of `-inf`.
pub fn guide(cond: &LogProbs, uncond: &LogProbs, gamma: f64) -> Result<LogProbs> {
    check_gamma(gamma)?;
    if cond.len() != uncond.len() {
        return Err(Error::LengthMismatch {
            expected: cond.len(),
            actual: uncond.len(),
        });
    }
    let combined: Vec<f64> = cond
        .0
        .iter()
        .zip(&uncond.0)
        .map(|(&c, &u)| {
            if gamma == 0.0 {
                return u;
            }
            if c == f64::NEG_INFINITY {
                return c;
            }
            let u = if u == f64::NEG_INFINITY {
                UNCOND_LOG_FLOOR
            } else {
                u
            };
            (1.0 - gamma) * u + gamma * c
        })
        .collect();
    normalize_values(&combined)
}

/// Where the unconditional context comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Only the last prompt token.
    LastToken,
    /// The negative prompt followed by the last prompt token.
    NegativePrompt,
    /// The prompt from this index on.
    CustomSplit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Temperature { temperature: f64 },
    TopK { k: usize, temperature: f64 },
    TopP { p: f64, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let check_t = |t: f64| {
            if t.is_finite() && t > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "temperature must be > 0, got {t}"
                )))
            }
        };
        match self.strategy {
            Strategy::Greedy => Ok(()),
            Strategy::Temperature { temperature } => check_t(temperature),
            Strategy::TopK { k, temperature } => {
                if k == 0 {
                    return Err(Error::InvalidConfig("top-k needs k >= 1".into()));
                }
                check_t(temperature)
            }
            Strategy::TopP { p, temperature } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "top-p needs p in (0, 1], got {p}"
                    )));
                }
                check_t(temperature)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub mode: ContextMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<TokenSeq>,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl GuidanceConfig {
    /// Last-token unconditional context with greedy decoding.
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            mode: ContextMode::LastToken,
            negative_prompt: None,
            sampler: SamplerConfig::default(),
        }
    }

    pub fn with_negative_prompt(mut self, negative: TokenSeq) -> Self {
        self.mode = ContextMode::NegativePrompt;
        self.negative_prompt = Some(negative);
        self
    }

    pub fn with_split(mut self, index: usize) -> Self {
        self.mode = ContextMode::CustomSplit(index);
        self
    }

    pub fn with_sampler(mut self, sampler: SamplerConfig) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        self.sampler.validate()?;
        if self.mode == ContextMode::NegativePrompt && self.negative_prompt.is_none() {
            return Err(Error::MissingNegativePrompt);
        }
        Ok(())
    }
}

/// Conditional and unconditional contexts, advanced in lockstep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualContext {
    pub cond: TokenSeq,
    pub uncond: TokenSeq,
    pub generated_count: usize,
}

impl DualContext {
    pub fn push(&mut self, token: TokenId) {
        self.cond.push(token);
        self.uncond.push(token);
        self.generated_count += 1;
    }

    /// Tokens appended since initialization.
    pub fn generated(&self) -> &[TokenId] {
        &self.cond[self.cond.len() - self.generated_count..]
    }
}

pub fn init_dual_context(prompt: &[TokenId], config: &GuidanceConfig) -> Result<DualContext> {
    let Some(&last) = prompt.last() else {
        return Err(Error::EmptyPrompt);
    };
    let uncond = match config.mode {
        ContextMode::LastToken => vec![last],
        ContextMode::NegativePrompt => {
            let negative = config
                .negative_prompt
                .as_ref()
                .ok_or(Error::MissingNegativePrompt)?;
            let mut u = negative.clone();
            u.push(last);
            u
        }
        ContextMode::CustomSplit(i) => {
            if i > prompt.len() {
                return Err(Error::InvalidConfig(format!(
                    "split index {i} beyond prompt of length {}",
                    prompt.len()
                )));
            }
            prompt[i..].to_vec()
        }
    };
    Ok(DualContext {
        cond: prompt.to_vec(),
        uncond,
        generated_count: 0,
    })
}

/// Conditional, unconditional and guided distributions for one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistributions {
    pub cond: LogProbs,
    pub uncond: LogProbs,
    pub guided: LogProbs,
}

fn score<M: LanguageModel + ?Sized>(model: &M, context: &[TokenId]) -> Result<LogProbs> {
    let logits = model.next_logits(context)?;
    if logits.len() != model.vocab_size() {
        return Err(Error::LengthMismatch {
            expected: model.vocab_size(),
            actual: logits.len(),
        });
    }
    normalize(&logits)
}

/// One backend call per context, then [`guide`].
pub fn next_distributions<M: LanguageModel + ?Sized>(
    model: &M,
    ctx: &DualContext,
    gamma: f64,
) -> Result<StepDistributions> {
    let cond = score(model, &ctx.cond)?;
    let uncond = score(model, &ctx.uncond)?;
    let guided = guide(&cond, &uncond, gamma)?;
    Ok(StepDistributions {
        cond,
        uncond,
        guided,
    })
}

fn scaled_probs(dist: &LogProbs, temperature: f64) -> Vec<f64> {
    let max = dist.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = dist
        .0
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Inverse-CDF draw over tokens in id order.
fn draw(weights: &[f64], rng: &mut SamplerRng) -> TokenId {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut cumulative = 0.0;
    let mut last_nonzero = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        cumulative += w;
        last_nonzero = i;
        if target < cumulative {
            return i as TokenId;
        }
    }
    last_nonzero as TokenId
}

/// Draws a token from `dist`.
///
/// Temperature is applied to the given (already guided) distribution; top-k
/// and top-p then truncate, and the survivors are renormalized.
pub fn sample(dist: &LogProbs, sampler: &Strategy, rng: &mut SamplerRng) -> TokenId {
    match *sampler {
        Strategy::Greedy => dist.argmax(),
        Strategy::Temperature { temperature } => draw(&scaled_probs(dist, temperature), rng),
        Strategy::TopK { k, temperature } => {
            let mut probs = scaled_probs(dist, temperature);
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            for &i in order.iter().skip(k) {
                probs[i] = 0.0;
            }
            draw(&probs, rng)
        }
        Strategy::TopP { p, temperature } => {
            let probs = scaled_probs(dist, temperature);
            let scaled = LogProbs(probs.iter().map(|w| w.ln()).collect());
            let mut kept = vec![0.0; probs.len()];
            for t in top_p_set(&scaled, p) {
                kept[t as usize] = probs[t as usize];
            }
            draw(&kept, rng)
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    pub guided_logprob: f64,
    #[serde(with = "crate::serde_logs::scalar")]
    pub cond_logprob: f64,
    #[serde(with = "crate::serde_logs::scalar")]
    pub uncond_logprob: f64,
    pub entropy_cond: f64,
    pub entropy_uncond: f64,
    pub entropy_guided: f64,
    /// Size of the intersection of the guided and conditional top-p sets.
    pub overlap_cond: usize,
    pub overlap_uncond: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<StepDistributions>,
}

impl StepRecord {
    fn new(token: TokenId, d: StepDistributions, keep: bool) -> Result<Self> {
        Ok(Self {
            token,
            guided_logprob: d.guided.get(token),
            cond_logprob: d.cond.get(token),
            uncond_logprob: d.uncond.get(token),
            entropy_cond: entropy(&d.cond)?,
            entropy_uncond: entropy(&d.uncond)?,
            entropy_guided: entropy(&d.guided)?,
            overlap_cond: top_p_overlap(&d.guided, &d.cond, DIAGNOSTIC_TOP_P),
            overlap_uncond: top_p_overlap(&d.guided, &d.uncond, DIAGNOSTIC_TOP_P),
            distributions: keep.then_some(d),
        })
    }
}

/// Scores both contexts, samples from the guided distribution and appends
/// the token to both contexts.
pub fn step<M: LanguageModel + ?Sized>(
    model: &M,
    ctx: &mut DualContext,
    config: &GuidanceConfig,
    rng: &mut SamplerRng,
) -> Result<StepRecord> {
    step_inner(model, ctx, config, rng, false)
}

fn step_inner<M: LanguageModel + ?Sized>(
    model: &M,
    ctx: &mut DualContext,
    config: &GuidanceConfig,
    rng: &mut SamplerRng,
    keep_distributions: bool,
) -> Result<StepRecord> {
    let d = next_distributions(model, ctx, config.gamma)?;
    let token = sample(&d.guided, &config.sampler.strategy, rng);
    let record = StepRecord::new(token, d, keep_distributions)?;
    ctx.push(token);
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
    StopSequence,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Eos => "eos",
            StopReason::MaxTokens => "max_tokens",
            StopReason::StopSequence => "stop_sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: TokenSeq,
    pub config: GuidanceConfig,
    pub steps: Vec<StepRecord>,
    /// `None` only on a partial trace attached to an error.
    pub stop_reason: Option<StopReason>,
}

impl GenerationTrace {
    pub fn tokens(&self) -> TokenSeq {
        self.steps.iter().map(|s| s.token).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<TokenSeq>,
    /// Keep full cond/uncond/guided vectors on every step.
    #[serde(default)]
    pub record_distributions: bool,
}

impl GenerateOptions {
    pub fn new(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            stop: Vec::new(),
            record_distributions: false,
        }
    }

    pub fn with_stop(mut self, stop: TokenSeq) -> Self {
        self.stop.push(stop);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_distributions = true;
        self
    }
}

/// A failed generation together with everything produced before the failure.
#[derive(Debug, Error)]
#[error("generation failed after {} steps: {error}", partial.steps.len())]
pub struct GenerateError {
    #[source]
    pub error: Error,
    pub partial: Box<GenerationTrace>,
}

/// Incremental decoding session; [`generate`] drives one to completion.
pub struct Decoder<'m, M: ?Sized> {
    model: &'m M,
    ctx: DualContext,
    config: GuidanceConfig,
    options: GenerateOptions,
    rng: SamplerRng,
    steps: usize,
    done: Option<StopReason>,
}

impl<'m, M: LanguageModel + ?Sized> Decoder<'m, M> {
    pub fn new(
        model: &'m M,
        prompt: &[TokenId],
        config: &GuidanceConfig,
        options: GenerateOptions,
    ) -> Result<Self> {
        config.validate()?;
        if options.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
        }
        validate(prompt, model.vocab_size())?;
        if let Some(neg) = &config.negative_prompt {
            validate(neg, model.vocab_size())?;
        }
        let ctx = init_dual_context(prompt, config)?;
        Ok(Self {
            model,
            ctx,
            config: config.clone(),
            options,
            rng: sampler_rng(config.sampler.seed),
            steps: 0,
            done: None,
        })
    }

    pub fn context(&self) -> &DualContext {
        &self.ctx
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.done
    }

    /// Runs one step, or returns `None` once a stop condition has fired.
    pub fn next_step(&mut self) -> Option<Result<StepRecord>> {
        if self.done.is_some() {
            return None;
        }
        let record = match step_inner(
            self.model,
            &mut self.ctx,
            &self.config,
            &mut self.rng,
            self.options.record_distributions,
        ) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        self.steps += 1;
        let generated = self.ctx.generated();
        self.done = if Some(record.token) == self.model.eos_token() {
            Some(StopReason::Eos)
        } else if self
            .options
            .stop
            .iter()
            .any(|s| !s.is_empty() && generated.ends_with(s))
        {
            Some(StopReason::StopSequence)
        } else if self.steps >= self.options.max_tokens {
            Some(StopReason::MaxTokens)
        } else {
            None
        };
        Some(Ok(record))
    }
}

/// Decodes until EOS, a stop sequence, or `max_tokens`.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &GuidanceConfig,
    options: &GenerateOptions,
) -> std::result::Result<GenerationTrace, GenerateError> {
    let mut trace = GenerationTrace {
        prompt: prompt.to_vec(),
        config: config.clone(),
        steps: Vec::new(),
        stop_reason: None,
    };
    let mut decoder = match Decoder::new(model, prompt, config, options.clone()) {
        Ok(d) => d,
        Err(error) => {
            return Err(GenerateError {
                error,
                partial: Box::new(trace),
            })
        }
    };
    while let Some(res) = decoder.next_step() {
        match res {
            Ok(record) => trace.steps.push(record),
            Err(error) => {
                return Err(GenerateError {
                    error,
                    partial: Box::new(trace),
                })
            }
        }
    }
    trace.stop_reason = decoder.stop_reason();
    Ok(trace)
}

/// Log-sum-exp of a log-distribution; 0 when normalized.
pub fn total_log_mass(dist: &LogProbs) -> f64 {
    log_sum_exp(&dist.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TableModel;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn lp(p: &[f64]) -> LogProbs {
        LogProbs(p.iter().map(|x| x.ln()).collect())
    }

    #[test]
    fn normalize_zeros_is_uniform() {
        let out = normalize_values(&[0.0; 258]).unwrap();
        for v in out.as_slice() {
            assert!((v + 258f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_all_neg_inf_fails() {
        assert!(matches!(
            normalize_values(&[f64::NEG_INFINITY; 4]),
            Err(Error::AllNegInfinity)
        ));
    }

    #[test]
    fn normalize_shift_invariant() {
        let x = [1.0, -2.0, 0.5, f64::NEG_INFINITY];
        let a = normalize_values(&x).unwrap();
        let b = normalize_values(&x.map(|v| v + 1234.5)).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!(p == q || (p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn guide_identity_cases() {
        let c = lp(&[0.2, 0.5, 0.3]);
        let u = lp(&[0.5, 0.3, 0.2]);
        let g1 = guide(&c, &u, 1.0).unwrap();
        let g0 = guide(&c, &u, 0.0).unwrap();
        for i in 0..3 {
            assert!((g1.as_slice()[i] - c.as_slice()[i]).abs() <= 1e-12);
            assert!((g0.as_slice()[i] - u.as_slice()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn guide_worked_example() {
        // u * (c / u)^2 = c^2 / u = [0.08, 0.8333.., 0.45]; total 1.36333..
        let c = lp(&[0.2, 0.5, 0.3]);
        let u = lp(&[0.5, 0.3, 0.2]);
        let g = guide(&c, &u, 2.0).unwrap().probs();
        let raw = [0.04 / 0.5, 0.25 / 0.3, 0.09 / 0.2];
        let total: f64 = raw.iter().sum();
        for i in 0..3 {
            assert!((g[i] - raw[i] / total).abs() < 1e-12);
        }
        assert!((g[0] - 0.0587).abs() < 1e-4);
        assert!((g[1] - 0.6112).abs() < 1e-4);
        assert!((g[2] - 0.3301).abs() < 1e-4);
    }

    #[test]
    fn guide_neg_inf_rules() {
        let ninf = f64::NEG_INFINITY;
        let c = LogProbs(vec![ninf, 0.5f64.ln(), 0.5f64.ln()]);
        let u = LogProbs(vec![ninf, 0.0, ninf]);
        let g = guide(&c, &u, 2.0).unwrap();
        // impossible under both stays impossible
        assert_eq!(g.as_slice()[0], ninf);
        // impossible only under uncond: floored, so strongly boosted but finite
        assert!(g.as_slice()[2].is_finite());
        assert!(g.as_slice()[2] > g.as_slice()[1]);
        // impossible under cond only
        let c2 = LogProbs(vec![ninf, 0.0]);
        let u2 = LogProbs(vec![0.5f64.ln(), 0.5f64.ln()]);
        assert_eq!(guide(&c2, &u2, 0.5).unwrap().as_slice()[0], ninf);
        assert_eq!(guide(&c2, &u2, 0.0).unwrap(), u2);
    }

    #[test]
    fn guide_rejects_bad_gamma_and_lengths() {
        let c = lp(&[0.5, 0.5]);
        assert!(guide(&c, &c, -1.0).is_err());
        assert!(guide(&c, &c, f64::NAN).is_err());
        assert!(matches!(
            guide(&c, &lp(&[1.0]), 1.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn init_modes() {
        let prompt = vec![1, 2, 3];
        let ctx = init_dual_context(&prompt, &GuidanceConfig::new(1.5)).unwrap();
        assert_eq!(ctx.cond, vec![1, 2, 3]);
        assert_eq!(ctx.uncond, vec![3]);
        assert_eq!(ctx.generated_count, 0);

        let ctx = init_dual_context(
            &prompt,
            &GuidanceConfig::new(1.5).with_negative_prompt(vec![9, 9]),
        )
        .unwrap();
        assert_eq!(ctx.uncond, vec![9, 9, 3]);

        let ctx = init_dual_context(&prompt, &GuidanceConfig::new(1.5).with_split(0)).unwrap();
        assert_eq!(ctx.uncond, ctx.cond);
        let ctx = init_dual_context(&prompt, &GuidanceConfig::new(1.5).with_split(2)).unwrap();
        assert_eq!(ctx.uncond, vec![3]);
        assert!(init_dual_context(&prompt, &GuidanceConfig::new(1.5).with_split(4)).is_err());
    }

    #[test]
    fn init_errors() {
        assert!(matches!(
            init_dual_context(&[], &GuidanceConfig::new(1.0)),
            Err(Error::EmptyPrompt)
        ));
        let mut cfg = GuidanceConfig::new(1.0);
        cfg.mode = ContextMode::NegativePrompt;
        assert!(matches!(
            init_dual_context(&[1], &cfg),
            Err(Error::MissingNegativePrompt)
        ));
    }

    fn v3_oracle() -> TableModel {
        // cond context [1, 2] ends in 2; uncond context [2] is the last token
        let mut m = TableModel::new(2, vec![0.5, 0.3, 0.2]).unwrap();
        m.insert(vec![1, 2], vec![0.2, 0.5, 0.3]).unwrap();
        m
    }

    #[test]
    fn step_on_worked_example_picks_token_one() {
        let m = v3_oracle();
        let cfg = GuidanceConfig::new(2.0);
        let mut ctx = init_dual_context(&[1, 2], &cfg).unwrap();
        let mut rng = sampler_rng(0);
        let rec = step(&m, &mut ctx, &cfg, &mut rng).unwrap();
        assert_eq!(rec.token, 1);
        assert_eq!(ctx.cond, vec![1, 2, 1]);
        assert_eq!(ctx.uncond, vec![2, 1]);
        assert_eq!(ctx.generated(), &[1]);
        assert!((rec.guided_logprob.exp() - 0.6112).abs() < 1e-4);
    }

    #[test]
    fn step_with_equal_rows_is_argmax() {
        let m = TableModel::new(0, vec![0.1, 0.6, 0.3]).unwrap();
        for gamma in [0.0, 0.5, 1.0, 3.0] {
            let cfg = GuidanceConfig::new(gamma);
            let mut ctx = init_dual_context(&[0, 2], &cfg).unwrap();
            let rec = step(&m, &mut ctx, &cfg, &mut sampler_rng(1)).unwrap();
            assert_eq!(rec.token, 1);
        }
    }

    #[test]
    fn sample_one_hot_under_every_strategy() {
        let d = lp(&[0.0, 0.0, 1.0, 0.0]);
        let mut rng = sampler_rng(7);
        for s in [
            Strategy::Greedy,
            Strategy::Temperature { temperature: 0.7 },
            Strategy::Temperature { temperature: 5.0 },
            Strategy::TopK {
                k: 2,
                temperature: 1.0,
            },
            Strategy::TopP {
                p: 0.9,
                temperature: 1.0,
            },
        ] {
            for _ in 0..20 {
                assert_eq!(sample(&d, &s, &mut rng), 2);
            }
        }
    }

    #[test]
    fn tiny_temperature_matches_greedy() {
        let d = lp(&[0.2, 0.35, 0.1, 0.35 - 1e-3, 1e-3]);
        let mut rng = sampler_rng(3);
        for _ in 0..50 {
            assert_eq!(
                sample(&d, &Strategy::Temperature { temperature: 1e-6 }, &mut rng),
                1
            );
        }
    }

    #[test]
    fn greedy_tie_breaks_to_lowest_id() {
        let d = lp(&[0.25, 0.375, 0.375]);
        assert_eq!(sample(&d, &Strategy::Greedy, &mut sampler_rng(0)), 1);
    }

    #[test]
    fn top_p_on_uniform_three_keeps_two() {
        let d = lp(&[1.0 / 3.0; 3]);
        let mut rng = sampler_rng(11);
        let mut seen = [0usize; 3];
        for _ in 0..600 {
            seen[sample(
                &d,
                &Strategy::TopP {
                    p: 0.4,
                    temperature: 1.0,
                },
                &mut rng,
            ) as usize] += 1;
        }
        assert_eq!(seen[2], 0);
        assert!(seen[0] > 200 && seen[1] > 200);
    }

    #[test]
    fn top_k_keeps_k_most_likely() {
        let d = lp(&[0.1, 0.4, 0.2, 0.3]);
        let mut rng = sampler_rng(5);
        for _ in 0..300 {
            let t = sample(
                &d,
                &Strategy::TopK {
                    k: 2,
                    temperature: 1.0,
                },
                &mut rng,
            );
            assert!(t == 1 || t == 3);
        }
    }

    #[test]
    fn temperature_sampling_follows_distribution() {
        let d = lp(&[0.1, 0.6, 0.3]);
        let mut rng = sampler_rng(42);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample(&d, &Strategy::Temperature { temperature: 1.0 }, &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.1, 0.6, 0.3]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.015);
        }
    }

    #[test]
    fn sampler_validation() {
        let bad = [
            Strategy::Temperature { temperature: 0.0 },
            Strategy::TopK {
                k: 0,
                temperature: 1.0,
            },
            Strategy::TopP {
                p: 0.0,
                temperature: 1.0,
            },
            Strategy::TopP {
                p: 1.5,
                temperature: 1.0,
            },
        ];
        for strategy in bad {
            assert!(SamplerConfig { strategy, seed: 0 }.validate().is_err());
        }
    }

    #[test]
    fn generate_max_tokens_one() {
        let m = v3_oracle();
        let t = generate(
            &m,
            &[1, 2],
            &GuidanceConfig::new(2.0),
            &GenerateOptions::new(1),
        )
        .unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.stop_reason, Some(StopReason::MaxTokens));
    }

    #[test]
    fn generate_stops_on_stop_sequence() {
        let mut m = TableModel::new(0, vec![0.0, 0.0, 1.0]).unwrap();
        m.insert(vec![], vec![0.0, 0.0, 1.0]).unwrap();
        let t = generate(
            &m,
            &[0],
            &GuidanceConfig::new(1.0),
            &GenerateOptions::new(10).with_stop(vec![2]),
        )
        .unwrap();
        assert_eq!(t.tokens(), vec![2]);
        assert_eq!(t.stop_reason, Some(StopReason::StopSequence));
    }

    #[test]
    fn generate_stops_on_eos() {
        let m = TableModel::new(0, vec![0.1, 0.0, 0.9]).unwrap().with_eos(2);
        let t = generate(
            &m,
            &[0],
            &GuidanceConfig::new(1.0),
            &GenerateOptions::new(10),
        )
        .unwrap();
        assert_eq!(t.tokens(), vec![2]);
        assert_eq!(t.stop_reason, Some(StopReason::Eos));
    }

    #[test]
    fn generate_rejects_zero_max_tokens() {
        let m = v3_oracle();
        let err = generate(
            &m,
            &[1],
            &GuidanceConfig::new(1.0),
            &GenerateOptions::new(0),
        )
        .unwrap_err();
        assert!(err.partial.steps.is_empty());
    }

    struct FailAfter {
        inner: TableModel,
        calls: std::sync::atomic::AtomicUsize,
        limit: usize,
    }

    impl LanguageModel for FailAfter {
        fn name(&self) -> &str {
            "flaky"
        }
        fn kind(&self) -> &'static str {
            "test"
        }
        fn vocab_size(&self) -> usize {
            self.inner.vocab_size()
        }
        fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
            if self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) >= self.limit {
                return Err(Error::Transport("gone".into()));
            }
            self.inner.next_logits(context)
        }
    }

    #[test]
    fn generate_attaches_partial_trace_on_error() {
        let m = FailAfter {
            inner: v3_oracle(),
            calls: 0.into(),
            limit: 4,
        };
        let err = generate(
            &m,
            &[1, 2],
            &GuidanceConfig::new(2.0),
            &GenerateOptions::new(10),
        )
        .unwrap_err();
        assert_eq!(err.partial.steps.len(), 2);
        assert!(matches!(err.error, Error::Transport(_)));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m = v3_oracle();
        let cfg = GuidanceConfig::new(1.5).with_sampler(SamplerConfig {
            strategy: Strategy::Temperature { temperature: 0.8 },
            seed: 99,
        });
        let a = generate(&m, &[1, 2], &cfg, &GenerateOptions::new(32)).unwrap();
        let b = generate(&m, &[1, 2], &cfg, &GenerateOptions::new(32)).unwrap();
        assert_eq!(a, b);
    }

    fn dist(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn guided_is_normalized(c in dist(8), u in dist(8), gamma in 0.0f64..6.0) {
            let c = normalize_values(&c).unwrap();
            let u = normalize_values(&u).unwrap();
            let g = guide(&c, &u, gamma).unwrap();
            prop_assert!(total_log_mass(&g).abs() < 1e-9);
        }

        #[test]
        fn equal_inputs_are_fixed_points(c in dist(8), gamma in 0.0f64..6.0) {
            let c = normalize_values(&c).unwrap();
            let g = guide(&c, &c, gamma).unwrap();
            for (a, b) in g.as_slice().iter().zip(c.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn guidance_composes(c in dist(8), u in dist(8), g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
            let c = normalize_values(&c).unwrap();
            let u = normalize_values(&u).unwrap();
            let twice = guide(&guide(&c, &u, g1).unwrap(), &u, g2).unwrap();
            let once = guide(&c, &u, g1 * g2).unwrap();
            for (a, b) in twice.as_slice().iter().zip(once.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn lockstep_contexts(tokens in proptest::collection::vec(0u32..3, 1..20)) {
            let mut ctx = init_dual_context(&[0, 1], &GuidanceConfig::new(2.0)).unwrap();
            for &t in &tokens {
                ctx.push(t);
            }
            let k = tokens.len();
            prop_assert_eq!(&ctx.cond[ctx.cond.len() - k..], &ctx.uncond[ctx.uncond.len() - k..]);
            prop_assert_eq!(ctx.generated(), tokens.as_slice());
        }
    }
}

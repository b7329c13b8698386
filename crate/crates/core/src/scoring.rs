//! Multiple-choice log-likelihood scoring under guidance, and pass@k.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::LanguageModel;
use crate::error::{Error, Result};
use crate::guidance::{
    init_dual_context, next_distributions, normalize, ContextMode, GuidanceConfig,
};
use crate::vocab::{encode, validate, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCTask {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<String>,
    #[serde(rename = "answer")]
    pub answer_index: usize,
}

impl MCTask {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("task {:?} needs at least two choices", self.id));
        }
        if self.choices.iter().any(String::is_empty) {
            return Err(format!("task {:?} has an empty choice", self.id));
        }
        if self.answer_index >= self.choices.len() {
            return Err(format!(
                "task {:?}: answer {} out of range for {} choices",
                self.id,
                self.answer_index,
                self.choices.len()
            ));
        }
        Ok(())
    }
}

/// Reads newline-delimited task records. Blank lines are ignored; line
/// numbers in errors are 1-based.
pub fn parse_tasks(text: &str) -> Result<Vec<MCTask>> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedTaskFile {
            line: i + 1,
            reason,
        };
        let task: MCTask = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        task.validate().map_err(malformed)?;
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(Error::EmptyTaskSet);
    }
    Ok(tasks)
}

/// Sum of guided log-probs of `continuation`, teacher-forced after `prompt`.
pub fn cfg_continuation_logprob<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    continuation: &[TokenId],
    config: &GuidanceConfig,
) -> Result<f64> {
    config.validate()?;
    if continuation.is_empty() {
        return Err(Error::InvalidArgs("continuation is empty".into()));
    }
    validate(prompt, model.vocab_size())?;
    validate(continuation, model.vocab_size())?;
    let mut ctx = init_dual_context(prompt, config)?;
    let mut total = 0.0;
    for &token in continuation {
        let d = next_distributions(model, &ctx, config.gamma)?;
        total += d.guided.get(token);
        ctx.push(token);
    }
    Ok(total)
}

/// Single-context log-likelihood of `continuation` after `prompt`.
pub fn plain_continuation_logprob<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    let mut context = prompt.to_vec();
    let mut total = 0.0;
    for &token in continuation {
        total += normalize(&model.next_logits(&context)?)?.get(token);
        context.push(token);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub logprob: f64,
    pub byte_len: usize,
    /// `logprob / byte_len`.
    pub logprob_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: String,
    pub answer: usize,
    pub prediction: usize,
    pub correct: bool,
    pub prediction_norm: usize,
    pub correct_norm: bool,
    pub choices: Vec<ChoiceScore>,
}

/// First index of the maximum.
fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn score_mc_task<M: LanguageModel + ?Sized>(
    model: &M,
    task: &MCTask,
    config: &GuidanceConfig,
) -> Result<TaskResult> {
    task.validate().map_err(Error::InvalidArgs)?;
    let prompt = encode(&task.prompt);
    let choices = task
        .choices
        .iter()
        .map(|choice| {
            let logprob = cfg_continuation_logprob(model, &prompt, &encode(choice), config)?;
            Ok(ChoiceScore {
                logprob,
                byte_len: choice.len(),
                logprob_norm: logprob / choice.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prediction = first_argmax(choices.iter().map(|c| c.logprob));
    let prediction_norm = first_argmax(choices.iter().map(|c| c.logprob_norm));
    Ok(TaskResult {
        id: task.id.clone(),
        answer: task.answer_index,
        prediction,
        correct: prediction == task.answer_index,
        prediction_norm,
        correct_norm: prediction_norm == task.answer_index,
        choices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub kind: String,
    pub vocab_size: usize,
}

impl ModelInfo {
    pub fn of<M: LanguageModel + ?Sized>(model: &M) -> Self {
        Self {
            name: model.name().to_string(),
            kind: model.kind().to_string(),
            vocab_size: model.vocab_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: ModelInfo,
    pub gamma: f64,
    pub mode: ContextMode,
    pub n_tasks: usize,
    pub acc: f64,
    pub acc_norm: f64,
    pub tasks: Vec<TaskResult>,
}

/// Scores every task (in parallel) and aggregates in input order.
pub fn evaluate_taskset<M: LanguageModel + ?Sized>(
    model: &M,
    tasks: &[MCTask],
    config: &GuidanceConfig,
) -> Result<ScoreReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyTaskSet);
    }
    config.validate()?;
    let results = tasks
        .par_iter()
        .map(|t| score_mc_task(model, t, config))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let acc = results.iter().filter(|r| r.correct).count() as f64 / n;
    let acc_norm = results.iter().filter(|r| r.correct_norm).count() as f64 / n;
    Ok(ScoreReport {
        model: ModelInfo::of(model),
        gamma: config.gamma,
        mode: config.mode,
        n_tasks: results.len(),
        acc,
        acc_norm,
        tasks: results,
    })
}

pub const REPORT_CSV_HEADER: &str =
    "id,answer,prediction,correct,prediction_norm,correct_norm,choice_logprobs,choice_logprobs_norm";

impl ScoreReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per task (choice scores joined by `;`), then a `mean` row
    /// carrying acc and acc_norm.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_CSV_HEADER);
        out.push('\n');
        let join = |f: fn(&ChoiceScore) -> f64, r: &TaskResult| {
            r.choices
                .iter()
                .map(|c| f(c).to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        for r in &self.tasks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&r.id),
                r.answer,
                r.prediction,
                u8::from(r.correct),
                r.prediction_norm,
                u8::from(r.correct_norm),
                join(|c| c.logprob, r),
                join(|c| c.logprob_norm, r)
            );
        }
        let _ = writeln!(out, "mean,,,{},,{},,", self.acc, self.acc_norm);
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Sample counts for one problem: `n` generated, `c` passing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassAtKInput {
    pub task_id: String,
    pub n: u64,
    pub c: u64,
}

/// Unbiased pass@k, `1 - C(n-c, k) / C(n, k)`, evaluated as the product
/// `1 - prod_{i<k} (n-c-i)/(n-i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(Error::InvalidArgs(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgs(format!("k = {k} must be in 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (0..k)
        .map(|i| (n - c - i) as f64 / (n - i) as f64)
        .product();
    Ok((1.0 - miss).clamp(0.0, 1.0))
}

/// Mean pass@k over problems, all at the same `k`.
pub fn aggregate_pass_at_k(inputs: &[PassAtKInput], k: u64) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgs("no pass@k inputs".into()));
    }
    let mut total = 0.0;
    for input in inputs {
        total += pass_at_k(input.n, input.c, k)
            .map_err(|e| Error::InvalidArgs(format!("task {:?}: {e}", input.task_id)))?;
    }
    Ok(total / inputs.len() as f64)
}

/// Reads newline-delimited `{"task_id", "n", "c"}` records.
pub fn parse_pass_inputs(text: &str) -> Result<Vec<PassAtKInput>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PassAtKInput =
            serde_json::from_str(line).map_err(|e| Error::MalformedTaskFile {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if rec.c > rec.n {
            return Err(Error::MalformedTaskFile {
                line: i + 1,
                reason: format!("c = {} exceeds n = {}", rec.c, rec.n),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgs("no pass@k inputs".into()));
    }
    Ok(out)
}

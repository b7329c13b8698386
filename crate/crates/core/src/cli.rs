//! Command-line entry point. The binary is a thin wrapper around [`run`].
//!
//! Exit codes: 0 success, 2 usage or validation, 3 IO, 4 runtime or service.
//!
//! `--config <file.toml>` supplies defaults per subcommand, e.g.
//!
//! ```toml
//! [generate]
//! gamma = 1.5
//! max-tokens = 64
//! ```
//!
//! Flags given on the command line take precedence.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    parse_trace_csv, summarize_rows, trace_rows_at, EntropyUnit, DIAGNOSTIC_TOP_P,
};
use crate::backend::{default_lambdas, NGramModel, DEFAULT_K};
use crate::error::Error;
use crate::guidance::{
    generate, GenerateOptions, GenerationTrace, GuidanceConfig, SamplerConfig, Strategy,
    DEFAULT_NEGATIVE_PROMPT,
};
use crate::registry::{load_model_file, Registry};
use crate::scoring::{
    aggregate_pass_at_k, evaluate_taskset, parse_pass_inputs, parse_tasks, pass_at_k,
};
use crate::service::{self, AppState};
use crate::vocab::{decode, encode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "cfg-guidance",
    version,
    about = "Classifier-free guidance for language model decoding"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file with per-subcommand defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a byte n-gram model.
    Train(TrainArgs),
    /// Generate a continuation with guidance.
    Generate(GenerateArgs),
    /// Score a multiple-choice task file.
    Score(ScoreArgs),
    /// Compute pass@k from sample counts.
    Passk(PasskArgs),
    /// Summarize a generation trace.
    Analyze(AnalyzeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: f64,
    /// Comma-separated interpolation weights, lowest order first.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Model name; defaults to the output file stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    LastToken,
    NegativePrompt,
    Split,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Unconditional prefix; negative-prompt mode falls back to a built-in default.
    #[arg(long)]
    pub negative_prompt: Option<String>,
    /// Prompt index where the unconditional context starts (split mode).
    #[arg(long)]
    pub split: Option<usize>,
}

impl GuidanceArgs {
    fn config(&self) -> Result<GuidanceConfig, CliError> {
        let mode = self
            .mode
            .unwrap_or(match (&self.negative_prompt, self.split) {
                (Some(_), _) => ModeArg::NegativePrompt,
                (None, Some(_)) => ModeArg::Split,
                _ => ModeArg::LastToken,
            });
        let base = GuidanceConfig::new(self.gamma);
        let config = match mode {
            ModeArg::LastToken => base,
            ModeArg::NegativePrompt => {
                let neg = self
                    .negative_prompt
                    .as_deref()
                    .unwrap_or(DEFAULT_NEGATIVE_PROMPT);
                base.with_negative_prompt(encode(neg))
            }
            ModeArg::Split => base.with_split(
                self.split
                    .ok_or_else(|| CliError::usage("--mode split needs --split"))?,
            ),
        };
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    /// Stop when the generated text ends with this string. Repeatable.
    #[arg(long)]
    pub stop: Vec<String>,
    /// Trace output: `.json` keeps full distributions, anything else is CSV.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Raw,
    Bytes,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Which accuracy to print as the headline figure; both are in the report.
    #[arg(long, value_enum, default_value_t = NormArg::Raw)]
    pub norm: NormArg,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PasskArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Nucleus mass for overlaps; needs a JSON trace unless it is 0.9.
    #[arg(long)]
    pub p: Option<f64>,
    /// Report entropies in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Registry config (TOML).
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub max_concurrency: usize,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Timeout { .. }
            | Error::Transport(_)
            | Error::BadResponse(_)
            | Error::AllNegInfinity => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<std::sync::Arc<dyn crate::LanguageModel>, CliError> {
    load_model_file(path)
        .map_err(|e| CliError::io(format!("cannot load model {}: {e}", path.display())))
}

/// Splices `[<subcommand>]` settings from `--config` in front of the
/// user's own subcommand flags, so the latter win.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut config_path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut iter = args.into_iter();
    while let Some(a) = iter.next() {
        if a == "--config" {
            config_path = iter.next();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config_path else {
        return Ok(rest);
    };
    let text = read_text(Path::new(&path))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{path}: {e}")))?;
    let Some(pos) = rest.iter().skip(1).position(|a| is_subcommand(a)) else {
        return Ok(rest);
    };
    let pos = pos + 1;
    let Some(toml::Value::Table(section)) = table.get(&rest[pos]) else {
        return Ok(rest);
    };
    let mut injected = Vec::new();
    for (key, value) in section {
        let flag = format!("--{key}");
        let mut push = |v: &toml::Value| -> Result<(), CliError> {
            match v {
                toml::Value::String(s) => injected.extend([flag.clone(), s.clone()]),
                toml::Value::Integer(i) => injected.extend([flag.clone(), i.to_string()]),
                toml::Value::Float(f) => injected.extend([flag.clone(), f.to_string()]),
                toml::Value::Boolean(true) => injected.push(flag.clone()),
                toml::Value::Boolean(false) => {}
                other => {
                    return Err(CliError::usage(format!(
                        "unsupported config value for {key}: {other}"
                    )))
                }
            }
            Ok(())
        };
        match value {
            toml::Value::Array(items) => {
                for item in items {
                    push(item)?;
                }
            }
            v => push(v)?,
        }
    }
    let mut out = rest[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[pos + 1..]);
    Ok(out)
}

fn is_subcommand(a: &str) -> bool {
    matches!(
        a,
        "train" | "generate" | "score" | "passk" | "analyze" | "serve"
    )
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `stdout`. Returns the process exit code.
pub fn run(args: Vec<String>, stdout: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Score(a) => cmd_score(a, out),
        Command::Passk(a) => cmd_passk(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn emit(out: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    out.write_all(bytes)
        .map_err(|e| CliError::io(e.to_string()))
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let lambdas = a
        .lambdas
        .clone()
        .unwrap_or_else(|| default_lambdas(a.order));
    // validate flags before touching the corpus
    if a.order == 0 {
        return Err(CliError::usage("--order must be at least 1"));
    }
    NGramModel::train(b"x", a.order, a.k, &lambdas)?;
    let corpus = std::fs::read(&a.corpus)
        .map_err(|e| CliError::io(format!("{}: {e}", a.corpus.display())))?;
    let name = a
        .name
        .clone()
        .or_else(|| a.out.file_stem().and_then(|s| s.to_str()).map(String::from))
        .unwrap_or_else(|| format!("ngram-{}", a.order));
    let model = NGramModel::train(&corpus, a.order, a.k, &lambdas)?.with_name(name);
    write_file(&a.out, &model.to_bytes()?)?;
    emit(
        out,
        format!(
            "trained order-{} model on {} bytes -> {}\n",
            a.order,
            corpus.len(),
            a.out.display()
        )
        .as_bytes(),
    )
}

fn sampler_from(a: &GenerateArgs) -> Result<SamplerConfig, CliError> {
    let t = a.temperature.unwrap_or(1.0);
    let strategy = match (a.temperature, a.top_k, a.top_p) {
        (_, Some(_), Some(_)) => {
            return Err(CliError::usage(
                "--top-k and --top-p are mutually exclusive",
            ))
        }
        (_, Some(k), None) => Strategy::TopK { k, temperature: t },
        (_, None, Some(p)) => Strategy::TopP { p, temperature: t },
        (Some(temperature), None, None) => Strategy::Temperature { temperature },
        (None, None, None) => Strategy::Greedy,
    };
    let sampler = SamplerConfig {
        strategy,
        seed: a.seed,
    };
    sampler.validate()?;
    Ok(sampler)
}

pub fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = a.guidance.config()?.with_sampler(sampler_from(&a)?);
    if a.max_tokens == 0 {
        return Err(CliError::usage("--max-tokens must be at least 1"));
    }
    if a.prompt.is_empty() {
        return Err(CliError::usage("--prompt must not be empty"));
    }
    let model = load_model(&a.model)?;
    let json_trace = a
        .trace_out
        .as_ref()
        .is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    let mut options = GenerateOptions::new(a.max_tokens);
    options.stop = a
        .stop
        .iter()
        .filter(|s| !s.is_empty())
        .map(encode)
        .collect();
    options.record_distributions = json_trace;

    let trace = generate(model.as_ref(), &encode(&a.prompt), &config, &options)
        .map_err(|e| CliError::from(e.error))?;
    let bytes = decode(&trace.tokens(), false)?;
    emit(out, String::from_utf8_lossy(&bytes).as_bytes())?;
    emit(out, b"\n")?;

    if let Some(path) = &a.trace_out {
        let contents = if json_trace {
            let mut s = serde_json::to_string(&trace).map_err(Error::from)?;
            s.push('\n');
            s.into_bytes()
        } else {
            crate::analysis::trace_summary(&trace)?
                .to_csv(EntropyUnit::Nats)
                .into_bytes()
        };
        write_file(path, &contents)?;
    }
    Ok(())
}

pub fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = a.guidance.config()?;
    let tasks = parse_tasks(&read_text(&a.tasks)?)?;
    let model = load_model(&a.model)?;
    let report = evaluate_taskset(model.as_ref(), &tasks, &config)?;
    let json = report.to_json()?;
    if let Some(path) = &a.out {
        write_file(path, json.as_bytes())?;
    }
    if let Some(path) = &a.csv {
        write_file(path, report.to_csv().as_bytes())?;
    }
    let (label, value) = match a.norm {
        NormArg::Raw => ("acc", report.acc),
        NormArg::Bytes => ("acc_norm", report.acc_norm),
    };
    if a.out.is_none() {
        emit(out, json.as_bytes())?;
    }
    emit(
        out,
        format!(
            "{label} = {value} over {} tasks (gamma = {})\n",
            report.n_tasks, report.gamma
        )
        .as_bytes(),
    )
}

pub fn cmd_passk(a: PasskArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let inputs = parse_pass_inputs(&read_text(&a.input)?)?;
    let mut table = String::from("task_id,n,c,pass_at_k\n");
    for i in &inputs {
        let v = pass_at_k(i.n, i.c, a.k)
            .map_err(|e| CliError::usage(format!("task {:?}: {e}", i.task_id)))?;
        table.push_str(&format!("{},{},{},{}\n", i.task_id, i.n, i.c, v));
    }
    let mean = aggregate_pass_at_k(&inputs, a.k)?;
    table.push_str(&format!("pass@{},,,{}\n", a.k, mean));
    emit(out, table.as_bytes())
}

pub fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read_text(&a.trace)?;
    let p = a.p.unwrap_or(DIAGNOSTIC_TOP_P);
    let rows = if text.trim_start().starts_with('{') {
        let trace: GenerationTrace =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad trace: {e}")))?;
        if trace.steps.iter().all(|s| s.distributions.is_some()) {
            trace_rows_at(&trace, p)?
        } else if p == DIAGNOSTIC_TOP_P {
            crate::analysis::trace_rows(&trace)
        } else {
            return Err(CliError::usage(
                "trace has no distributions; only --p 0.9 is available",
            ));
        }
    } else {
        if p != DIAGNOSTIC_TOP_P {
            return Err(CliError::usage(
                "CSV traces carry overlaps at p = 0.9 only; use a JSON trace",
            ));
        }
        parse_trace_csv(&text)?
    };
    let summary = summarize_rows(rows)?;
    let unit = if a.bits {
        EntropyUnit::Bits
    } else {
        EntropyUnit::Nats
    };
    let csv = summary.to_csv(unit);
    match &a.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => emit(out, csv.as_bytes())?,
    }
    let scale = if a.bits {
        std::f64::consts::LN_2.recip()
    } else {
        1.0
    };
    eprintln!(
        "steps={} median H_cond={} H_uncond={} H_guided={} ({}; {})",
        summary.steps,
        summary.median_entropy_cond * scale,
        summary.median_entropy_uncond * scale,
        summary.median_entropy_guided * scale,
        if a.bits { "bits" } else { "nats" },
        summary.averaging
    );
    Ok(())
}

pub fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let registry = match &a.models {
        Some(path) => Registry::load(path).map_err(|e| match e {
            Error::Io(io) => CliError::io(format!("{}: {io}", path.display())),
            other => CliError::usage(other.to_string()),
        })?,
        None => Registry::empty(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::runtime(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::runtime(e.to_string()))?;
        eprintln!("listening on http://{addr}");
        service::serve(listener, AppState::new(registry, a.max_concurrency))
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}

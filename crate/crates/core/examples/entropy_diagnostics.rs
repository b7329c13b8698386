//! Per-step entropies and top-p overlaps of guided decoding, as CSV.
//!
//! ```text
//! cargo run --example entropy_diagnostics -- 2.0 > trace.csv
//! ```

use std::path::PathBuf;

use cfg_guidance::analysis::{trace_summary, EntropyUnit};
use cfg_guidance::vocab::encode;
use cfg_guidance::{generate, GenerateOptions, GuidanceConfig, NGramModel};

fn main() -> cfg_guidance::Result<()> {
    let gamma: f64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(1.5);
    let corpus =
        std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt"))?;
    let model = NGramModel::train_default(&corpus, 4)?;

    let prompt = encode("I recommend to your consideration ");
    let trace = generate(
        &model,
        &prompt,
        &GuidanceConfig::new(gamma),
        &GenerateOptions::new(64),
    )
    .map_err(|e| e.error)?;
    let summary = trace_summary(&trace)?;
    print!("{}", summary.to_csv(EntropyUnit::Nats));
    eprintln!(
        "gamma {gamma}: mean H cond {:.3}, uncond {:.3}, guided {:.3} nats",
        summary.mean_entropy_cond, summary.mean_entropy_uncond, summary.mean_entropy_guided
    );
    Ok(())
}

//! Negative-prompt and split-prompt guidance.
//!
//! The unconditional branch sees the negative prompt in place of the real
//! instruction, so raising gamma pushes decoding toward whatever the edited
//! instruction adds.

use std::path::PathBuf;

use cfg_guidance::vocab::{decode, encode};
use cfg_guidance::{
    generate, GenerateOptions, GuidanceConfig, NGramModel, DEFAULT_NEGATIVE_PROMPT,
};

fn show(
    model: &NGramModel,
    label: &str,
    prompt: &str,
    config: GuidanceConfig,
) -> cfg_guidance::Result<()> {
    let trace = generate(model, &encode(prompt), &config, &GenerateOptions::new(80))
        .map_err(|e| e.error)?;
    let text = decode(&trace.tokens(), false)?;
    println!("{label:<28} {:?}", String::from_utf8_lossy(&text));
    Ok(())
}

fn main() -> cfg_guidance::Result<()> {
    let corpus =
        std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt"))?;
    let model = NGramModel::train_default(&corpus, 5)?;

    let edited = "The prompt below is a report on the war. The militia and the army ";
    let neutral = DEFAULT_NEGATIVE_PROMPT;
    println!("negative prompt: {neutral:?}\n");

    for gamma in [1.0, 2.0, 4.0] {
        let config = GuidanceConfig::new(gamma).with_negative_prompt(encode(neutral));
        show(
            &model,
            &format!("negative prompt, gamma {gamma}"),
            edited,
            config,
        )?;
    }

    // split: the unconditional branch keeps only the text after the instruction
    let split = edited.find("The militia").unwrap();
    for gamma in [1.0, 2.0] {
        let config = GuidanceConfig::new(gamma).with_split(split);
        show(
            &model,
            &format!("split at {split}, gamma {gamma}"),
            edited,
            config,
        )?;
    }
    Ok(())
}

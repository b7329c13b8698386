//! Greedy and sampled continuations at several guidance strengths.

use std::path::PathBuf;

use cfg_guidance::vocab::{decode, encode};
use cfg_guidance::{
    generate, GenerateOptions, GuidanceConfig, NGramModel, SamplerConfig, Strategy,
};

fn main() -> cfg_guidance::Result<()> {
    let corpus =
        std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt"))?;
    let model = NGramModel::train_default(&corpus, 4)?;
    let prompt = encode("It is with great satisfaction that I ");
    let options = GenerateOptions::new(120).with_stop(encode("."));

    for gamma in [1.0, 1.5, 3.0] {
        let config = GuidanceConfig::new(gamma);
        let trace = generate(&model, &prompt, &config, &options).map_err(|e| e.error)?;
        let text = String::from_utf8_lossy(&decode(&trace.tokens(), false)?).into_owned();
        println!("greedy  gamma={gamma:<4} {text:?}");
    }

    let sampler = SamplerConfig {
        strategy: Strategy::TopP {
            p: 0.9,
            temperature: 0.8,
        },
        seed: 7,
    };
    for gamma in [1.0, 1.5, 3.0] {
        let config = GuidanceConfig::new(gamma).with_sampler(sampler);
        let trace = generate(&model, &prompt, &config, &options).map_err(|e| e.error)?;
        let text = String::from_utf8_lossy(&decode(&trace.tokens(), false)?).into_owned();
        println!(
            "top-p   gamma={gamma:<4} {text:?} ({:?})",
            trace.stop_reason
        );
    }
    Ok(())
}

//! Multiple-choice scoring with guided continuation log-likelihoods.

use std::path::PathBuf;

use cfg_guidance::scoring::{evaluate_taskset, parse_tasks};
use cfg_guidance::{GuidanceConfig, NGramModel};

const TASKS: &str = r#"{"id":"capital","prompt":"the seat of Government at ","choices":["Philadelphia","Timbuktu"],"answer":0}
{"id":"body","prompt":"Fellow-Citizens of the Senate and House of ","choices":["Lords","Representatives"],"answer":1}
{"id":"nation","prompt":"the United ","choices":["States","Kingdom","Provinces"],"answer":0}
{"id":"treaty","prompt":"a treaty with the ","choices":["Indian tribes","robots"],"answer":0}
{"id":"revenue","prompt":"the public ","choices":["debt","banana"],"answer":0}
"#;

fn main() -> cfg_guidance::Result<()> {
    let corpus =
        std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt"))?;
    let model = NGramModel::train_default(&corpus, 4)?.with_name("sotu4");
    let tasks = parse_tasks(TASKS)?;

    for gamma in [1.0, 1.5, 2.0] {
        let report = evaluate_taskset(&model, &tasks, &GuidanceConfig::new(gamma))?;
        println!(
            "gamma {gamma}: acc {:.2}, acc_norm {:.2}",
            report.acc, report.acc_norm
        );
    }

    let report = evaluate_taskset(&model, &tasks, &GuidanceConfig::new(1.5))?;
    print!("\n{}", report.to_csv());
    Ok(())
}

//! Unbiased pass@k over a handful of problems.

use cfg_guidance::scoring::{aggregate_pass_at_k, pass_at_k, PassAtKInput};

fn main() -> cfg_guidance::Result<()> {
    let results = [
        ("sort", 20, 3),
        ("parse", 20, 0),
        ("sum", 20, 17),
        ("fizzbuzz", 20, 20),
    ];
    let inputs: Vec<PassAtKInput> = results
        .iter()
        .map(|&(id, n, c)| PassAtKInput {
            task_id: id.into(),
            n,
            c,
        })
        .collect();

    println!("{:<10} {:>6} {:>6} {:>6}", "task", "k=1", "k=5", "k=10");
    for i in &inputs {
        println!(
            "{:<10} {:>6.3} {:>6.3} {:>6.3}",
            i.task_id,
            pass_at_k(i.n, i.c, 1)?,
            pass_at_k(i.n, i.c, 5)?,
            pass_at_k(i.n, i.c, 10)?
        );
    }
    for k in [1, 5, 10] {
        println!("mean pass@{k} = {:.4}", aggregate_pass_at_k(&inputs, k)?);
    }
    Ok(())
}

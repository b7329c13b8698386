//! Trains a byte 4-gram on the bundled corpus and saves it.
//!
//! ```text
//! cargo run --example train_ngram -- [out.json]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use cfg_guidance::vocab::encode;
use cfg_guidance::NGramModel;

fn main() -> cfg_guidance::Result<()> {
    let corpus_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt");
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "sotu4.json".into());

    let corpus = std::fs::read(&corpus_path)?;
    let start = Instant::now();
    let model = NGramModel::train_default(&corpus, 4)?.with_name("sotu4");
    println!(
        "trained on {} bytes in {:.2?}",
        corpus.len(),
        start.elapsed()
    );
    println!("lambdas {:?}, k {}", model.lambdas(), model.k());

    for ctx in ["the Unit", "Congre", "Gentlemen of the "] {
        let lp = model.next_logprobs(&encode(ctx));
        let mut ranked: Vec<(usize, f64)> = lp.as_slice().iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<String> = ranked[..3]
            .iter()
            .map(|&(t, l)| format!("{:?} {:.3}", (t as u8) as char, l.exp()))
            .collect();
        println!("{ctx:>20} -> {}", top.join(", "));
    }

    model.save(&out)?;
    println!("saved {out}");
    Ok(())
}

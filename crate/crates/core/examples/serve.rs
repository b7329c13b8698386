//! Serves the bundled-corpus model over HTTP.
//!
//! ```text
//! cargo run --example serve -- 8080
//! curl -N localhost:8080/v1/generate -d '{"system_prompt":"Be brief.",
//!   "messages":[{"role":"user","text":"How are the finances?"}],"gamma":1.5,"max_tokens":40}'
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use cfg_guidance::registry::{ModelEntry, ModelSource, Registry};
use cfg_guidance::service::{serve, AppState};
use cfg_guidance::NGramModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let port: u16 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(8080);
    let corpus_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt");
    let model = NGramModel::train_default(&std::fs::read(&corpus_path)?, 4)?.with_name("sotu4");

    let mut registry = Registry::empty();
    let entry = ModelEntry {
        name: "sotu4".into(),
        source: ModelSource::Ngram {
            path: "sotu4.json".into(),
        },
    };
    registry.insert(entry, Arc::new(model));

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve(listener, AppState::new(registry, 4)).await
    })?;
    Ok(())
}

//! Decoding against a logits endpoint over HTTP.
//!
//! Starts a local endpoint that answers `POST /logits` from an n-gram model,
//! then drives it through `RemoteModel`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use cfg_guidance::vocab::{decode, encode, TokenId};
use cfg_guidance::{
    generate, GenerateOptions, GuidanceConfig, NGramModel, RemoteConfig, RemoteModel,
};
use serde_json::{json, Value};

async fn logits(State(model): State<Arc<NGramModel>>, Json(body): Json<Value>) -> Json<Value> {
    let context: Vec<TokenId> = serde_json::from_value(body["context"].clone()).unwrap_or_default();
    Json(json!({ "logits": model.next_logprobs(&context).as_slice() }))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus =
        std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt"))?;
    let model = Arc::new(NGramModel::train_default(&corpus, 4)?);

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    let app = Router::new()
        .route("/logits", post(logits))
        .with_state(model);
    rt.spawn(async move { axum::serve(listener, app).await });

    let remote = RemoteModel::new(
        "remote-sotu",
        RemoteConfig {
            endpoint: format!("http://{addr}"),
            vocab_size: 258,
            timeout_ms: 5_000,
            retries: 1,
            eos: None,
        },
    )?;
    let trace = generate(
        &remote,
        &encode("The state of our finances "),
        &GuidanceConfig::new(1.5),
        &GenerateOptions::new(60),
    )
    .map_err(|e| e.error)?;
    println!(
        "{}",
        String::from_utf8_lossy(&decode(&trace.tokens(), false)?)
    );
    Ok(())
}

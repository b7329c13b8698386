use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{mpsc, Arc};

use cfg_guidance::registry::{ModelEntry, ModelSource, Registry, RegistryConfig};
use cfg_guidance::service::{
    router_with_limit, AppState, ModelsResponse, StreamEvent, DEFAULT_BODY_LIMIT,
};
use cfg_guidance::vocab::decode;
use cfg_guidance::{
    generate, GenerateOptions, GuidanceConfig, NGramModel, TableModel, DEFAULT_NEGATIVE_PROMPT,
};
use serde_json::json;

struct Server {
    base: String,
    agent: ureq::Agent,
}

impl Server {
    fn start(registry: Registry, body_limit: usize) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                let app = router_with_limit(AppState::new(registry, 4), body_limit);
                axum::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: format!("http://{addr}"),
            agent,
        }
    }

    fn get(&self, path: &str) -> (u16, String) {
        let mut r = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    fn post(&self, path: &str, body: &str) -> (u16, String) {
        let mut r = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    fn events(&self, body: serde_json::Value) -> Vec<StreamEvent> {
        let (status, text) = self.post("/v1/generate", &body.to_string());
        assert_eq!(status, 200, "{text}");
        text.lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sotu_1790_1831.txt")
}

fn model_file(dir: &Path) -> PathBuf {
    let text = std::fs::read(corpus()).unwrap();
    let path = dir.join("m.json");
    NGramModel::train_default(&text[..50_000], 3)
        .unwrap()
        .with_name("m")
        .save(&path)
        .unwrap();
    path
}

fn registry(dir: &Path) -> Registry {
    let path = model_file(dir);
    let config = RegistryConfig {
        models: vec![ModelEntry {
            name: "m".into(),
            source: ModelSource::Ngram { path },
        }],
    };
    Registry::from_config(config, dir).unwrap()
}

fn request(gamma: f64, max_tokens: usize) -> serde_json::Value {
    json!({
        "model": "m",
        "system_prompt": "You are a clerk.",
        "messages": [{"role": "user", "text": "Report on the state of the Union."}],
        "gamma": gamma,
        "max_tokens": max_tokens,
    })
}

#[test]
fn health_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(registry(dir.path()), DEFAULT_BODY_LIMIT);
    assert_eq!(server.get("/health"), (200, "ok".into()));
    let (status, body) = server.get("/v1/models");
    assert_eq!(status, 200);
    let models: ModelsResponse = serde_json::from_str(&body).unwrap();
    assert_eq!(models.models.len(), 1);
    assert_eq!(models.models[0].name, "m");
    assert_eq!(models.models[0].vocab_size, 258);
    assert_eq!(models.default_negative_prompt, DEFAULT_NEGATIVE_PROMPT);

    let empty = Server::start(Registry::empty(), DEFAULT_BODY_LIMIT);
    let models: ModelsResponse = serde_json::from_str(&empty.get("/v1/models").1).unwrap();
    assert!(models.models.is_empty());
    let (status, _) = empty.post("/v1/generate", &request(1.0, 4).to_string());
    assert_eq!(status, 400);
}

#[test]
fn one_token_then_done() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(registry(dir.path()), DEFAULT_BODY_LIMIT);
    let events = server.events(request(1.5, 1));
    assert_eq!(events.len(), 2);
    assert!(events[0].token.is_some() && !events[0].done);
    assert!(events[1].done && events[1].token.is_none());
    assert_eq!(
        serde_json::to_value(events[1].stop_reason).unwrap(),
        "max_tokens"
    );
}

#[test]
fn stream_matches_library_decoding() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let model = reg.get(Some("m")).unwrap();
    let server = Server::start(reg, DEFAULT_BODY_LIMIT);

    let events = server.events(request(1.0, 40));
    let tokens: Vec<u32> = events.iter().filter_map(|e| e.token).collect();
    assert_eq!(tokens.len(), 40);
    let text: String = events.iter().map(|e| e.text.as_str()).collect();
    assert_eq!(text.as_bytes(), decode(&tokens, false).unwrap());

    // gamma 1 is plain conditional decoding
    let prompt = cfg_guidance::vocab::encode(
        "SYSTEM:\nYou are a clerk.\n\nUSER:\nReport on the state of the Union.\n\nASSISTANT:\n",
    );
    let plain = generate(
        model.as_ref(),
        &prompt,
        &GuidanceConfig::new(1.0),
        &GenerateOptions::new(40),
    )
    .unwrap();
    assert_eq!(tokens, plain.tokens());

    // stateless: same request, same stream
    let mut sampled = request(2.0, 30);
    sampled["temperature"] = json!(0.9);
    sampled["seed"] = json!(11);
    assert_eq!(server.events(sampled.clone()), server.events(sampled));
}

#[test]
fn negative_prompt_equal_to_system_prompt_is_conditional() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(registry(dir.path()), DEFAULT_BODY_LIMIT);
    let tokens = |body: serde_json::Value| -> Vec<u32> {
        server.events(body).iter().filter_map(|e| e.token).collect()
    };
    let mut base = request(1.0, 30);
    base["temperature"] = json!(0.8);
    base["seed"] = json!(3);
    let reference = tokens(base.clone());
    for gamma in [0.0, 2.0, 4.0] {
        let mut req = base.clone();
        req["gamma"] = json!(gamma);
        req["negative_system_prompt"] = json!("You are a clerk.");
        assert_eq!(tokens(req), reference, "gamma {gamma}");
    }
}

#[test]
fn bad_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(registry(dir.path()), 4096);
    assert_eq!(server.post("/v1/generate", "{").0, 400);
    let mut req = request(1.0, 4);
    req["messages"] = json!([]);
    assert_eq!(server.post("/v1/generate", &req.to_string()).0, 400);
    let mut req = request(-1.0, 4);
    assert_eq!(server.post("/v1/generate", &req.to_string()).0, 400);
    req = request(1.0, 4);
    req["top_k"] = json!(3);
    req["top_p"] = json!(0.5);
    assert_eq!(server.post("/v1/generate", &req.to_string()).0, 400);

    let tasks = "{\"id\":\"a\",\"prompt\":\"x\",\"choices\":[\"y\",\"z\"],\"answer\":0}\n{broken\n";
    let (status, body) = server.post(
        "/v1/score",
        &json!({"model": "m", "tasks": tasks}).to_string(),
    );
    assert_eq!(status, 400);
    assert!(body.contains("line 2"), "{body}");

    let big = request(1.0, 4)
        .to_string()
        .replace("You are a clerk.", &"x".repeat(8192));
    assert_eq!(server.post("/v1/generate", &big).0, 413);
}

#[test]
fn score_matches_cli_report() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let tasks_text = concat!(
        "{\"id\":\"1\",\"prompt\":\"the United \",\"choices\":[\"States\",\"zzqx\"],\"answer\":0}\n",
        "{\"id\":\"2\",\"prompt\":\"Fellow-\",\"choices\":[\"qqq\",\"Citizens\",\"Cats\"],\"answer\":1}\n",
        "{\"id\":\"3\",\"prompt\":\"Gentlemen of the \",\"choices\":[\"House\",\"Senate\"],\"answer\":1}\n",
    );
    let tasks = dir.path().join("tasks.jsonl");
    std::fs::write(&tasks, tasks_text).unwrap();
    let out = dir.path().join("r.json");
    let o = Command::new(env!("CARGO_BIN_EXE_cfg-guidance"))
        .args(["score", "--model"])
        .arg(dir.path().join("m.json"))
        .arg("--tasks")
        .arg(&tasks)
        .args(["--gamma", "1.5", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let server = Server::start(reg, DEFAULT_BODY_LIMIT);
    let (status, body) = server.post(
        "/v1/score",
        &json!({"model": "m", "gamma": 1.5, "tasks": tasks_text}).to_string(),
    );
    assert_eq!(status, 200, "{body}");
    assert_eq!(body, std::fs::read_to_string(&out).unwrap());
}

#[test]
fn table_backend_serves_too() {
    let mut reg = Registry::empty();
    let mut default = vec![0.0; 258];
    default[b'z' as usize] = 1.0;
    let model = TableModel::new(1, default).unwrap().with_name("zz");
    let entry = ModelEntry {
        name: "zz".into(),
        source: ModelSource::Table {
            path: "unused.json".into(),
        },
    };
    reg.insert(entry, Arc::new(model));
    let server = Server::start(reg, DEFAULT_BODY_LIMIT);
    let mut req = request(3.0, 5);
    req["model"] = json!("zz");
    let text: String = server.events(req).iter().map(|e| e.text.as_str()).collect();
    assert_eq!(text, "zzzzz");
}

//! HTTP client for an external logits endpoint.
//!
//! Wire protocol: `POST <endpoint>/logits` with `{"context": [int, ...]}`,
//! answered by `{"logits": [float, ...]}`. JSON has no infinities, so a
//! `null` logit stands for `-inf`.

use std::io::ErrorKind;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LogitVector};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

/// Settings for a [`RemoteModel`], as they appear in a registry config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Vocabulary size the endpoint advertises; every response must match it.
    pub vocab_size: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<TokenId>,
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    context: &'a [TokenId],
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Vec<Option<f64>>,
}

#[derive(Debug)]
pub struct RemoteModel {
    name: String,
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteModel {
    pub fn new(name: impl Into<String>, config: RemoteConfig) -> Result<Self> {
        if config.vocab_size == 0 {
            return Err(Error::InvalidConfig(
                "remote vocabulary size must be positive".into(),
            ));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            name: name.into(),
            config,
            agent,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/logits", self.config.endpoint.trim_end_matches('/'))
    }

    fn request_once(&self, context: &[TokenId]) -> Result<LogitVector> {
        let mut resp = self
            .agent
            .post(&self.url())
            .send_json(&LogitsRequest { context })
            .map_err(|e| self.classify(e))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Error::Transport(format!("endpoint answered HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Error::BadResponse(format!(
                "endpoint answered HTTP {status}"
            )));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.classify(e))?;
        let parsed: LogitsResponse = serde_json::from_str(&body)
            .map_err(|e| Error::BadResponse(format!("unparseable body: {e}")))?;
        if parsed.logits.len() != self.config.vocab_size {
            return Err(Error::BadResponse(format!(
                "expected {} logits, got {}",
                self.config.vocab_size,
                parsed.logits.len()
            )));
        }
        let values: Vec<f64> = parsed
            .logits
            .into_iter()
            .map(|v| v.unwrap_or(f64::NEG_INFINITY))
            .collect();
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::BadResponse("non-finite logit in response".into()));
        }
        LogitVector::new(values)
    }

    fn classify(&self, err: ureq::Error) -> Error {
        match err {
            ureq::Error::Timeout(_) => Error::Timeout {
                endpoint: self.config.endpoint.clone(),
            },
            ureq::Error::Io(e)
                if matches!(e.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock) =>
            {
                Error::Timeout {
                    endpoint: self.config.endpoint.clone(),
                }
            }
            other => Error::Transport(other.to_string()),
        }
    }
}

impl LanguageModel for RemoteModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "remote"
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.config.eos
    }

    /// One POST per attempt; transport failures and timeouts are retried up
    /// to `retries` times, malformed responses are not.
    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        let mut attempt = 0;
        loop {
            match self.request_once(context) {
                Err(e @ (Error::Transport(_) | Error::Timeout { .. }))
                    if attempt < self.config.retries =>
                {
                    tracing::debug!(attempt, error = %e, "retrying logits request");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Answers every request with `body`, counting requests.
    fn mock(body: &'static str, delay: Option<Duration>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                counter.fetch_add(1, Ordering::SeqCst);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut len = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                            break;
                        }
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                    let mut buf = vec![0; len];
                    let _ = reader.read_exact(&mut buf);
                    if let Some(d) = delay {
                        std::thread::sleep(d);
                    }
                    let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                });
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn client(endpoint: String, vocab_size: usize) -> RemoteModel {
        RemoteModel::new(
            "mock",
            RemoteConfig {
                endpoint,
                vocab_size,
                timeout_ms: 2_000,
                retries: 2,
                eos: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn echoes_fixed_vector() {
        let (url, hits) = mock(r#"{"logits": [1.5, -2.0, null]}"#, None);
        let m = client(url, 3);
        let v = m.next_logits(&[1, 2]).unwrap();
        assert_eq!(v.as_slice(), &[1.5, -2.0, f64::NEG_INFINITY]);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn wrong_length_is_bad_response() {
        let (url, hits) = mock(r#"{"logits": [1.0, 2.0]}"#, None);
        let m = client(url, 3);
        assert!(matches!(m.next_logits(&[0]), Err(Error::BadResponse(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn garbage_is_bad_response() {
        let (url, _) = mock("not json", None);
        assert!(matches!(
            client(url, 3).next_logits(&[0]),
            Err(Error::BadResponse(_))
        ));
    }

    #[test]
    fn endpoint_down_is_transport_error() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let m = client(format!("http://{addr}"), 3);
        assert!(matches!(m.next_logits(&[0]), Err(Error::Transport(_))));
    }

    #[test]
    fn slow_endpoint_times_out_after_retries() {
        let (url, hits) = mock(r#"{"logits": [0.0]}"#, Some(Duration::from_millis(600)));
        let m = RemoteModel::new(
            "slow",
            RemoteConfig {
                endpoint: url,
                vocab_size: 1,
                timeout_ms: 100,
                retries: 1,
                eos: None,
            },
        )
        .unwrap();
        assert!(matches!(m.next_logits(&[0]), Err(Error::Timeout { .. })));
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }
}

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::mock::PatternTable;
use super::{BackendKind, GenerationError, ModelParams, ModelProfile, PromptBundle};

/// Why a single backend call failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    Timeout(String),
    Failure(String),
}

/// A chat model behind a uniform call. Implementations must be usable from
/// several threads at once.
pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn params(&self) -> &ModelParams;
    fn call(&self, bundle: &PromptBundle) -> Result<String, CallError>;
}

pub struct MockBackend {
    id: String,
    params: ModelParams,
    table: &'static PatternTable,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, params: ModelParams) -> Self {
        Self {
            id: id.into(),
            params,
            table: PatternTable::bundled(),
        }
    }
}

impl ChatBackend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn call(&self, bundle: &PromptBundle) -> Result<String, CallError> {
        if self.params.mock_delay_ms > 0 {
            thread::sleep(Duration::from_millis(self.params.mock_delay_ms));
        }
        Ok(self.table.complete(bundle))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    system: &'a str,
    user: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

/// Generic JSON chat endpoint: `{system, user, temperature, max_tokens}` in,
/// `{text}` out.
pub struct HttpChatBackend {
    id: String,
    endpoint: String,
    params: ModelParams,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, params: ModelParams) -> Result<Self, GenerationError> {
        let id = id.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(params.timeout_s))
            .build()
            .map_err(|e| GenerationError::InvalidProfile {
                backend_id: id.clone(),
                detail: e.to_string(),
            })?;
        Ok(Self {
            id,
            endpoint: endpoint.into(),
            params,
            client,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn call(&self, bundle: &PromptBundle) -> Result<String, CallError> {
        let req = ChatRequest {
            system: &bundle.system_instructions,
            user: &bundle.user_prompt,
            temperature: self.params.temperature,
            max_tokens: self.params.max_output_tokens,
        };
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                CallError::Timeout(e.to_string())
            } else {
                CallError::Failure(e.to_string())
            }
        };
        let resp = self.client.post(&self.endpoint).json(&req).send().map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(CallError::Failure(format!("HTTP {status}")));
        }
        resp.json::<ChatResponse>().map(|r| r.text).map_err(classify)
    }
}

pub fn backend_for(profile: &ModelProfile) -> Result<Arc<dyn ChatBackend>, GenerationError> {
    profile.validate()?;
    Ok(match profile.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(&profile.backend_id, profile.params.clone())),
        BackendKind::HttpChat => Arc::new(HttpChatBackend::new(
            &profile.backend_id,
            profile.endpoint.clone().unwrap_or_default(),
            profile.params.clone(),
        )?),
    })
}

const BACKOFF_BASE: Duration = Duration::from_millis(250);

/// Calls the backend, retrying failed calls with exponential backoff
/// (250 ms, 500 ms, ...). Returns the raw answer and the seconds spent,
/// retries included.
pub fn complete_block(bundle: &PromptBundle, backend: &dyn ChatBackend) -> Result<(String, f64), GenerationError> {
    let started = Instant::now();
    let retries = backend.params().retries;
    let mut last = CallError::Failure("no attempt made".into());
    for attempt in 0..=retries {
        if attempt > 0 {
            thread::sleep(BACKOFF_BASE * 2u32.saturating_pow(attempt - 1));
        }
        match backend.call(bundle) {
            Ok(text) => return Ok((text, started.elapsed().as_secs_f64())),
            Err(e) => {
                tracing::warn!(backend = backend.backend_id(), attempt, error = ?e, "backend call failed");
                last = e;
            }
        }
    }
    let attempts = retries + 1;
    Err(match last {
        CallError::Timeout(_) => GenerationError::BackendTimeout {
            backend_id: backend.backend_id().to_string(),
            attempts,
        },
        CallError::Failure(detail) => GenerationError::BackendFailure {
            backend_id: backend.backend_id().to_string(),
            attempts,
            detail,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form_model::FormSchema;
    use crate::generation::assemble_prompt;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn bundle() -> PromptBundle {
        assemble_prompt(FormSchema::bundled().block(1).unwrap(), &[])
    }

    #[test]
    fn mock_latency_positive_and_output_deterministic() {
        let b = MockBackend::new("mock", ModelParams::default());
        let (a, t) = complete_block(&bundle(), &b).unwrap();
        let (c, _) = complete_block(&bundle(), &b).unwrap();
        assert!(t > 0.0);
        assert_eq!(a, c);
    }

    #[test]
    fn mock_delay_is_a_latency_floor() {
        let params = ModelParams {
            mock_delay_ms: 100,
            ..ModelParams::default()
        };
        let (_, t) = complete_block(&bundle(), &MockBackend::new("mock", params)).unwrap();
        assert!(t >= 0.1, "{t}");
    }

    #[test]
    fn unreachable_endpoint_fails_without_retry() {
        // grab a free port, then close it so connections are refused
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let params = ModelParams {
            retries: 0,
            timeout_s: 2.0,
            ..ModelParams::default()
        };
        let b = HttpChatBackend::new("remote", format!("http://127.0.0.1:{port}/chat"), params).unwrap();
        match complete_block(&bundle(), &b) {
            Err(GenerationError::BackendFailure { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("{other:?}"),
        }
    }

    struct Flaky {
        fails: u32,
        calls: AtomicU32,
        params: ModelParams,
    }

    impl ChatBackend for Flaky {
        fn backend_id(&self) -> &str {
            "flaky"
        }
        fn params(&self) -> &ModelParams {
            &self.params
        }
        fn call(&self, _: &PromptBundle) -> Result<String, CallError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fails {
                Err(CallError::Timeout("slow".into()))
            } else {
                Ok("{}".into())
            }
        }
    }

    #[test]
    fn retries_then_succeeds_or_reports_timeout() {
        let params = ModelParams {
            retries: 1,
            ..ModelParams::default()
        };
        let ok = Flaky {
            fails: 1,
            calls: AtomicU32::new(0),
            params: params.clone(),
        };
        let (_, t) = complete_block(&bundle(), &ok).unwrap();
        assert!(t >= BACKOFF_BASE.as_secs_f64());
        assert_eq!(ok.calls.load(Ordering::SeqCst), 2);
        let bad = Flaky {
            fails: 5,
            calls: AtomicU32::new(0),
            params,
        };
        assert!(matches!(
            complete_block(&bundle(), &bad),
            Err(GenerationError::BackendTimeout { attempts: 2, .. })
        ));
    }

    #[test]
    fn http_chat_wire_format() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read headers and body
            loop {
                let n = s.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(h) = text.find("\r\n\r\n") {
                    let len: usize = text[..h]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                        .unwrap();
                    if buf.len() >= h + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"{"text":"{\"ecog\": 3}"}"#;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}", body.len()).unwrap();
            String::from_utf8(buf).unwrap()
        });
        let b = HttpChatBackend::new("remote", format!("http://{addr}/chat"), ModelParams::default()).unwrap();
        let (text, _) = complete_block(&bundle(), &b).unwrap();
        assert_eq!(text, "{\"ecog\": 3}");
        let request = server.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(request.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 1024);
        assert!(body["system"].as_str().unwrap().contains("JSON"));
        assert!(body["user"].as_str().unwrap().contains("ecog"));
    }
}

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, info, warn};

use super::{ChatMessage, Policy, PolicyError, PolicyRequest};

/// Settings of the chat-completion client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpPolicyConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding a bearer token; none sends no auth header.
    pub auth_env: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub top_k: u32,
    /// Sends `top_k` in the request body; most chat backends reject it.
    pub forward_top_k: bool,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpPolicyConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            auth_env: None,
            temperature: 0.1,
            top_p: 0.9,
            max_tokens: 512,
            top_k: 600,
            forward_top_k: false,
            max_attempts: 4,
            initial_backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug)]
pub struct HttpPolicy {
    config: HttpPolicyConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpPolicy {
    /// Reads the auth token (if configured) once, up front.
    pub fn new(config: HttpPolicyConfig) -> Result<Self, PolicyError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                PolicyError::Unavailable(format!("auth variable `{var}` is not set"))
            })?),
            None => None,
        };
        if config.max_attempts == 0 {
            return Err(PolicyError::Unavailable("max_attempts must be at least 1".into()));
        }
        if !config.forward_top_k {
            info!(top_k = config.top_k, "top_k is not part of the chat request body; not sent");
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent, token })
    }

    pub fn config(&self) -> &HttpPolicyConfig {
        &self.config
    }

    fn body(&self, messages: &[ChatMessage]) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens,
        });
        if self.config.forward_top_k {
            body["top_k"] = json!(self.config.top_k);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(format!("malformed response body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal("response has no choices[0].message.content".into()))
    }
}

impl Policy for HttpPolicy {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn generate(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let body = self.body(request.messages);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            let started = Instant::now();
            match self.attempt(&body) {
                Ok(text) => {
                    debug!(
                        episode = request.episode_id,
                        step = request.step,
                        purpose = %request.purpose,
                        latency_ms = started.elapsed().as_millis() as u64,
                        "completion"
                    );
                    return Ok(text);
                }
                Err(Attempt::Fatal(msg)) => return Err(PolicyError::Unavailable(msg)),
                Err(Attempt::Retry(msg)) => {
                    warn!(episode = request.episode_id, attempt, error = %msg, "policy request failed");
                    last = msg;
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(backoff);
                        backoff = backoff.saturating_mul(2);
                    }
                }
            }
        }
        Err(PolicyError::Unavailable(format!(
            "{} attempts failed; last error: {last}",
            self.config.max_attempts
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Purpose;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in order, one per connection, and records bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                counter.fetch_add(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1/chat/completions"), hits, handle)
    }

    fn config(endpoint: String) -> HttpPolicyConfig {
        HttpPolicyConfig {
            endpoint,
            model: "m".into(),
            max_attempts: 3,
            initial_backoff_ms: 1,
            timeout_secs: 5,
            ..HttpPolicyConfig::default()
        }
    }

    fn request(messages: &[ChatMessage]) -> PolicyRequest<'_> {
        PolicyRequest {
            purpose: Purpose::Act,
            episode_id: "q1",
            step: 0,
            messages,
        }
    }

    #[test]
    fn unwraps_completion_text() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Thought: x\nAction: finish(a)"}}]}"#;
        let (url, _, handle) = serve(vec![(200, ok.into())]);
        let p = HttpPolicy::new(config(url)).unwrap();
        let msgs = [ChatMessage::system("s"), ChatMessage::user("u")];
        assert_eq!(p.generate(&request(&msgs)).unwrap(), "Thought: x\nAction: finish(a)");
        let bodies = handle.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["temperature"], 0.1);
        assert_eq!(sent["top_p"], 0.9);
        assert_eq!(sent["max_tokens"], 512);
        assert_eq!(sent["messages"][1]["role"], "user");
        assert!(sent.get("top_k").is_none());
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"done"}}]}"#;
        let (url, hits, handle) = serve(vec![(503, "{}".into()), (500, "{}".into()), (200, ok.into())]);
        let p = HttpPolicy::new(config(url)).unwrap();
        assert_eq!(p.generate(&request(&[])).unwrap(), "done");
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_are_unavailable() {
        let (url, hits, handle) = serve(vec![(500, "{}".into()), (502, "{}".into()), (503, "{}".into())]);
        let p = HttpPolicy::new(config(url)).unwrap();
        assert!(matches!(p.generate(&request(&[])), Err(PolicyError::Unavailable(_))));
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, hits, handle) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let p = HttpPolicy::new(config(url)).unwrap();
        assert!(p.generate(&request(&[])).is_err());
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_auth_variable_is_reported() {
        let mut c = config("http://127.0.0.1:9/".into());
        c.auth_env = Some("KGAGENT_TEST_SURELY_UNSET_VAR".into());
        assert!(HttpPolicy::new(c).is_err());
    }

    #[test]
    fn top_k_is_forwarded_on_request() {
        let mut c = config("http://127.0.0.1:9/".into());
        c.forward_top_k = true;
        let p = HttpPolicy::new(c).unwrap();
        assert_eq!(p.body(&[])["top_k"], 600);
    }
}

//! LLM client backends: a deterministic scripted client for tests and offline
//! runs, and a remote chat-completion client.

use std::fs;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("script exhausted: no reply left for prompt starting {0:?}")]
    ScriptExhausted(String),
    #[error("script entry {index} expects a prompt containing {matcher:?}")]
    ScriptMismatch { index: usize, matcher: String },
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("failed to read script {path}: {message}")]
    ScriptFile { path: String, message: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("missing credential: set {0}")]
    MissingCredential(String),
}

/// A single-turn completion backend. Implementations must be safe to call
/// from multiple threads; sessions serialize their own calls.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// One scripted exchange: the prompt must contain `matcher`; the client then
/// returns `reply` or simulates a failure with `error`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub matcher: String,
    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ScriptEntry {
    pub fn reply(matcher: &str, reply: &str) -> Self {
        Self {
            matcher: matcher.to_owned(),
            reply: Some(reply.to_owned()),
            error: None,
        }
    }

    pub fn failure(matcher: &str, message: &str) -> Self {
        Self {
            matcher: matcher.to_owned(),
            reply: None,
            error: Some(message.to_owned()),
        }
    }
}

/// Fully deterministic client that consumes an ordered list of
/// matcher/reply pairs. Each call takes the next entry; the prompt must
/// contain the entry's matcher (empty matcher matches anything).
pub struct ScriptedClient {
    entries: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl ScriptedClient {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            cursor: Mutex::new(0),
        }
    }

    /// Loads a JSON array of `{"matcher": ..., "reply": ...}` /
    /// `{"matcher": ..., "error": ...}` objects.
    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::ScriptFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| LlmError::ScriptFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(Self::new(entries))
    }

    /// A client that answers every prompt with the same text.
    pub fn constant(reply: &str) -> Self {
        Self {
            entries: vec![ScriptEntry::reply("", reply)],
            cursor: Mutex::new(usize::MAX),
        }
    }

    pub fn remaining(&self) -> usize {
        let cursor = *self.cursor.lock().unwrap();
        if cursor == usize::MAX {
            usize::MAX
        } else {
            self.entries.len().saturating_sub(cursor)
        }
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut cursor = self.cursor.lock().unwrap();
        let index = if *cursor == usize::MAX {
            // constant mode: always serve entry 0
            0
        } else {
            let i = *cursor;
            *cursor += 1;
            i
        };
        let entry = self.entries.get(index).ok_or_else(|| {
            LlmError::ScriptExhausted(prompt.chars().take(60).collect())
        })?;
        if !entry.matcher.is_empty() && !prompt.contains(&entry.matcher) {
            return Err(LlmError::ScriptMismatch {
                index,
                matcher: entry.matcher.clone(),
            });
        }
        match (&entry.reply, &entry.error) {
            (Some(reply), _) => Ok(reply.clone()),
            (None, Some(message)) => Err(LlmError::Scripted(message.clone())),
            (None, None) => Ok(String::new()),
        }
    }
}

/// Counting gate bounding concurrent in-flight requests.
pub(crate) struct Gate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    pub fn new(limit: usize) -> Self {
        Self {
            permits: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.freed.wait(permits).unwrap();
        }
        *permits -= 1;
        drop(permits);
        let out = f();
        *self.permits.lock().unwrap() += 1;
        self.freed.notify_one();
        out
    }
}

/// Env var holding the chat API credential.
pub const LLM_API_KEY_VAR: &str = "KGQA_LLM_API_KEY";

#[derive(Clone, Debug)]
pub struct RemoteChatConfig {
    /// Base URL; the client posts to `{base}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    /// Total attempts = 1 + retries.
    pub retries: u32,
    pub max_in_flight: usize,
    /// Bearer token; read from [`LLM_API_KEY_VAR`] when `None`.
    pub api_key: Option<String>,
}

impl RemoteChatConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            model: model.to_owned(),
            timeout: Duration::from_secs(60),
            retries: 2,
            max_in_flight: 4,
            api_key: None,
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: String,
}

/// Chat-completion client speaking the common
/// `POST {base}/chat/completions` JSON shape with bearer authentication.
/// Transient failures (transport errors, 429, 5xx) are retried with
/// exponential backoff inside the configured retry budget.
pub struct RemoteChatClient {
    config: RemoteChatConfig,
    api_key: String,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteChatClient {
    pub fn new(config: RemoteChatConfig) -> Result<Self, LlmError> {
        let api_key = match &config.api_key {
            Some(k) => k.clone(),
            None => std::env::var(LLM_API_KEY_VAR)
                .map_err(|_| LlmError::MissingCredential(LLM_API_KEY_VAR.into()))?,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let gate = Gate::new(config.max_in_flight);
        Ok(Self {
            config,
            api_key,
            http,
            gate,
        })
    }

    fn post_once(&self, prompt: &str) -> Result<String, String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let url = format!("{}/chat/completions", self.config.base_url);
        let response = self
            .http
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(format!("retryable status {status}"));
        }
        if !status.is_success() {
            // Non-retryable client error; surface the body for context.
            let text = response.text().unwrap_or_default();
            return Err(format!("status {status}: {text}"));
        }
        let parsed: ChatResponse = response.json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| "no choices in response".to_owned())
    }
}

impl LlmClient for RemoteChatClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.gate.run(|| {
            let attempts = self.config.retries + 1;
            let mut last = String::new();
            for attempt in 0..attempts {
                match self.post_once(prompt) {
                    Ok(reply) => return Ok(reply),
                    Err(message) => last = message,
                }
                if attempt + 1 < attempts {
                    std::thread::sleep(Duration::from_millis(100 << attempt));
                }
            }
            Err(LlmError::Transport {
                attempts,
                message: last,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn scripted_client_replays_in_order() {
        let client = ScriptedClient::new(vec![
            ScriptEntry::reply("first", "one"),
            ScriptEntry::failure("second", "boom"),
        ]);
        assert_eq!(client.complete("the first prompt").unwrap(), "one");
        assert!(matches!(
            client.complete("the second prompt"),
            Err(LlmError::Scripted(_))
        ));
        assert!(matches!(
            client.complete("anything"),
            Err(LlmError::ScriptExhausted(_))
        ));
    }

    #[test]
    fn scripted_client_rejects_mismatched_prompt() {
        let client = ScriptedClient::new(vec![ScriptEntry::reply("needle", "x")]);
        assert!(matches!(
            client.complete("no match here"),
            Err(LlmError::ScriptMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn constant_client_never_exhausts() {
        let client = ScriptedClient::constant("same");
        for _ in 0..5 {
            assert_eq!(client.complete("p").unwrap(), "same");
        }
    }

    /// Serves `responses` (raw HTTP) one connection at a time on a local port.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                stream.write_all(response.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), handle)
    }

    fn http_json(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    #[test]
    fn remote_client_parses_choice_content() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi there"}}]}"#;
        let (url, handle) = serve(vec![http_json("200 OK", body)]);
        let mut config = RemoteChatConfig::new(&url, "test-model");
        config.api_key = Some("k".into());
        config.retries = 0;
        let client = RemoteChatClient::new(config).unwrap();
        assert_eq!(client.complete("hello").unwrap(), "hi there");
        handle.join().unwrap();
    }

    #[test]
    fn remote_client_retries_on_server_error() {
        let ok = r#"{"choices":[{"message":{"content":"recovered"}}]}"#;
        let (url, handle) = serve(vec![
            http_json("500 Internal Server Error", "{}"),
            http_json("200 OK", ok),
        ]);
        let mut config = RemoteChatConfig::new(&url, "m");
        config.api_key = Some("k".into());
        config.retries = 1;
        let client = RemoteChatClient::new(config).unwrap();
        assert_eq!(client.complete("p").unwrap(), "recovered");
        handle.join().unwrap();
    }

    #[test]
    fn remote_client_gives_up_after_budget() {
        let (url, handle) = serve(vec![
            http_json("500 Internal Server Error", "{}"),
            http_json("500 Internal Server Error", "{}"),
        ]);
        let mut config = RemoteChatConfig::new(&url, "m");
        config.api_key = Some("k".into());
        config.retries = 1;
        let client = RemoteChatClient::new(config).unwrap();
        assert!(matches!(
            client.complete("p"),
            Err(LlmError::Transport { attempts: 2, .. })
        ));
        handle.join().unwrap();
    }

    #[test]
    fn gate_reenters_and_releases() {
        let gate = Gate::new(2);
        let out = gate.run(|| gate.run(|| 7));
        assert_eq!(out, 7);
    }
}

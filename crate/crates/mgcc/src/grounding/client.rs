//! Completion clients: a scripted mock keyed by prompt hash, and a remote
//! HTTP client with exponential-backoff retries and a bound on concurrent
//! in-flight requests.
//!
//! Wire format for the remote client: POST a JSON body `{"prompt": "..."}`
//! and read a JSON body `{"completion": "..."}` back.

use crate::error::{MgccError, Result};
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Serialize, Deserialize)]
struct CompletionRequest {
    prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompletionResponse {
    completion: String,
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct BoundedGate {
    permits: Mutex<usize>,
    available: Condvar,
}

impl BoundedGate {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a BoundedGate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().unwrap() += 1;
        self.gate.available.notify_one();
    }
}

// ── Scripted mock ──────────────────────────────────────────────────────

/// Transcript file format for the scripted client. Each entry is keyed by
/// the full prompt text or its SHA-256 hex; repeated calls with the same
/// prompt walk the completion list and then repeat the last entry.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Transcript {
    #[serde(default)]
    pub responses: Vec<TranscriptEntry>,
    /// Fallback completions for prompts with no matching entry.
    #[serde(default)]
    pub default: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub completions: Vec<String>,
}

/// Deterministic mock: an immutable response table keyed by prompt hash,
/// with a per-key cursor so scripted retry sequences play out in order.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    responses: HashMap<String, Vec<String>>,
    default: Vec<String>,
    cursors: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register the completion sequence for one exact prompt.
    pub fn register(&mut self, prompt: &str, completions: Vec<String>) {
        self.responses.insert(sha256_hex(prompt.as_bytes()), completions);
    }

    /// Register completions served to any unmatched prompt.
    pub fn register_default(&mut self, completions: Vec<String>) {
        self.default = completions;
    }

    pub fn from_transcript(transcript: Transcript) -> Result<Self> {
        let mut client = Self::new();
        for entry in transcript.responses {
            let key = match (&entry.prompt, &entry.prompt_sha256) {
                (Some(p), _) => sha256_hex(p.as_bytes()),
                (None, Some(h)) => h.to_lowercase(),
                (None, None) => {
                    return Err(MgccError::Config(
                        "transcript entry needs a prompt or prompt_sha256".into(),
                    ))
                }
            };
            client.responses.insert(key, entry.completions);
        }
        client.default = transcript.default;
        Ok(client)
    }

    pub fn from_transcript_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_transcript(serde_json::from_str(&text)?)
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = sha256_hex(prompt.as_bytes());
        let (completions, cursor_key) = match self.responses.get(&key) {
            Some(c) => (c, key),
            None if !self.default.is_empty() => (&self.default, "*".to_string()),
            None => {
                return Err(MgccError::Client(format!(
                    "no scripted completion for prompt hash {key}"
                )))
            }
        };
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(cursor_key).or_insert(0);
        let completion = completions[(*cursor).min(completions.len() - 1)].clone();
        *cursor += 1;
        Ok(completion)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

// ── Remote client ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

/// Blocking HTTP client: retries transport and HTTP failures with
/// exponential backoff, up to `max_retries` retries after the first try.
pub struct RemoteClient {
    config: RemoteConfig,
    http: reqwest::blocking::Client,
    gate: BoundedGate,
    calls: AtomicUsize,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| MgccError::Client(format!("building http client: {e}")))?;
        let gate = BoundedGate::new(config.max_in_flight);
        Ok(Self {
            config,
            http,
            gate,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        let _permit = self.gate.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = CompletionRequest {
            prompt: prompt.to_string(),
        };
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff * 2u32.pow(attempt as u32 - 1);
                std::thread::sleep(delay);
            }
            match self.try_once(&body) {
                Ok(completion) => return Ok(completion),
                Err(e) => last_error = e,
            }
        }
        Err(MgccError::Client(format!(
            "{} attempts to {} failed; last error: {last_error}",
            self.config.max_retries + 1,
            self.config.endpoint
        )))
    }

    fn try_once(&self, body: &CompletionRequest) -> std::result::Result<String, String> {
        let response = self
            .http
            .post(&self.config.endpoint)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        if !response.status().is_success() {
            return Err(format!("http status {}", response.status()));
        }
        let parsed: CompletionResponse = response.json().map_err(|e| e.to_string())?;
        Ok(parsed.completion)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

// ── Unified client ─────────────────────────────────────────────────────

/// The completion client the grounding pipeline talks to.
pub enum CompletionClient {
    Scripted(ScriptedClient),
    Remote(RemoteClient),
}

impl CompletionClient {
    pub fn complete(&self, prompt: &str) -> Result<String> {
        match self {
            Self::Scripted(c) => c.complete(prompt),
            Self::Remote(c) => c.complete(prompt),
        }
    }

    /// Total client calls issued, for call-budget assertions.
    pub fn calls(&self) -> usize {
        match self {
            Self::Scripted(c) => c.calls(),
            Self::Remote(c) => c.calls(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn scripted_client_replays_sequences_then_repeats_last() {
        let mut client = ScriptedClient::new();
        client.register("p", vec!["one".into(), "two".into()]);
        assert_eq!(client.complete("p").unwrap(), "one");
        assert_eq!(client.complete("p").unwrap(), "two");
        assert_eq!(client.complete("p").unwrap(), "two");
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn scripted_client_uses_default_for_unknown_prompts() {
        let mut client = ScriptedClient::new();
        client.register_default(vec!["fallback".into()]);
        assert_eq!(client.complete("anything").unwrap(), "fallback");
    }

    #[test]
    fn scripted_client_errors_without_any_match() {
        let client = ScriptedClient::new();
        assert!(matches!(
            client.complete("mystery"),
            Err(MgccError::Client(_))
        ));
    }

    #[test]
    fn transcript_round_trip() {
        let transcript = Transcript {
            responses: vec![TranscriptEntry {
                prompt: Some("hello".into()),
                prompt_sha256: None,
                completions: vec!["world".into()],
            }],
            default: vec!["dunno".into()],
        };
        let json = serde_json::to_string(&transcript).unwrap();
        let client =
            ScriptedClient::from_transcript(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(client.complete("hello").unwrap(), "world");
        assert_eq!(client.complete("other").unwrap(), "dunno");
    }

    #[test]
    fn bounded_gate_limits_concurrency() {
        use std::sync::atomic::AtomicUsize;
        use std::sync::Arc;
        let gate = Arc::new(BoundedGate::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let gate = gate.clone();
                let live = live.clone();
                let peak = peak.clone();
                std::thread::spawn(move || {
                    let _permit = gate.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    /// Minimal one-shot HTTP server for the remote-client wire format.
    fn serve_once(listener: TcpListener, status: &'static str, body: String) {
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            // Read the request head and enough of the body to release the client.
            let _ = stream.read(&mut buf);
            let response = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        });
    }

    #[test]
    fn remote_client_round_trips_the_wire_format() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        serve_once(
            listener,
            "200 OK",
            r#"{"completion":"Objects: []"}"#.to_string(),
        );
        let client = RemoteClient::new(RemoteConfig {
            endpoint: format!("http://{addr}/complete"),
            timeout: Duration::from_secs(5),
            max_retries: 0,
            backoff: Duration::from_millis(1),
            max_in_flight: 1,
        })
        .unwrap();
        assert_eq!(client.complete("a prompt").unwrap(), "Objects: []");
    }

    #[test]
    fn remote_client_retries_after_server_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        // First response is a 500; the retry gets a 200.
        std::thread::spawn(move || {
            for (status, body) in [
                ("500 Internal Server Error", String::new()),
                ("200 OK", r#"{"completion":"ok"}"#.to_string()),
            ] {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let response = format!(
                    "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
        });
        let client = RemoteClient::new(RemoteConfig {
            endpoint: format!("http://{addr}/complete"),
            timeout: Duration::from_secs(5),
            max_retries: 2,
            backoff: Duration::from_millis(1),
            max_in_flight: 1,
        })
        .unwrap();
        assert_eq!(client.complete("a prompt").unwrap(), "ok");
    }

    #[test]
    fn remote_client_gives_up_after_max_retries() {
        // Nothing is listening on this port.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let client = RemoteClient::new(RemoteConfig {
            endpoint: format!("http://{addr}/complete"),
            timeout: Duration::from_millis(200),
            max_retries: 1,
            backoff: Duration::from_millis(1),
            max_in_flight: 1,
        })
        .unwrap();
        match client.complete("a prompt") {
            Err(MgccError::Client(msg)) => assert!(msg.contains("2 attempts")),
            other => panic!("expected client error, got {other:?}"),
        }
    }
}

//! Session-aware HTTP serving endpoint: the only loop that talks to clients
//! and the only writer of the session store.
//!
//! Each request is authenticated, classified as a main-line or side turn,
//! linked back to the previous turn as its next-state signal (enqueuing a
//! judge job, fire-and-forget), and answered with a generation from the
//! current policy snapshot. Nothing on this path waits on the judge or the
//! trainer: both are reached only through non-blocking queues, so serving
//! latency is generation latency.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::Sender;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::judge::JudgeJob;
use crate::policy::{
    context_from_messages, PolicyError, PolicyParams, SnapshotHub, TerminatedBy, Vocabulary, EOS,
};
use crate::recorder::{RecordEvent, RecordKind, Recorder, RecorderError};
use crate::session::{
    classify_turn, derive_session_id, hash_api_key, link_next_state, SessionStore,
};
use crate::sync::{derive_seed, now_ms, Gate, ShutdownFlag};
use crate::types::{TokenId, TurnKind, TurnRecord};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("bad request: {0}")]
    BadRequest(String),
}

// ───────────────────────── configuration ─────────────────────────

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Bind address; port 0 picks a free port.
    pub addr: String,
    pub run_seed: u64,
    pub default_max_len: usize,
    pub default_temperature: f64,
    /// When set, the bearer token must match exactly. Otherwise any
    /// non-empty token is accepted and only identifies the caller.
    pub required_key: Option<String>,
    /// Sessions idle longer than this are evicted.
    pub session_ttl_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            addr: "127.0.0.1:0".into(),
            run_seed: 0,
            default_max_len: 16,
            default_temperature: 1.0,
            required_key: None,
            session_ttl_ms: 3_600_000,
        }
    }
}

// ───────────────────────── wire types ─────────────────────────

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub max_len: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

/// Body of POST /v1/chat. The session id and turn-kind hint may arrive here
/// or in the X-Session-Id / X-Turn-Kind headers; headers win.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<crate::types::Message>,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub turn_kind_hint: Option<String>,
    #[serde(default)]
    pub generation: Option<GenerationOptions>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub response_text: String,
    pub session_id: String,
    /// Index within the session, counted per turn kind.
    pub turn_index: usize,
    pub turn_kind: String,
    pub policy_version: u64,
    pub terminated_by: String,
    pub tokens: Vec<TokenId>,
}

fn kind_str(kind: TurnKind) -> &'static str {
    match kind {
        TurnKind::MainLine => "main",
        TurnKind::Side => "side",
    }
}

fn terminated_str(t: TerminatedBy) -> &'static str {
    match t {
        TerminatedBy::Eos => "eos",
        TerminatedBy::MaxLen => "max_len",
    }
}

// ───────────────────────── chat service ─────────────────────────

/// The request-handling core, independent of the HTTP layer so tests and the
/// simulator can call it directly.
pub struct ChatService {
    pub config: GatewayConfig,
    vocab: Vocabulary,
    hub: Arc<SnapshotHub>,
    store: Arc<SessionStore>,
    judge_tx: Sender<JudgeJob>,
    recorder: Arc<Recorder>,
    /// Test hook: handlers pass this between reading the snapshot handle and
    /// sampling, so a test can hold generations in flight across a swap.
    generation_gate: Gate,
    served: AtomicU64,
}

impl ChatService {
    pub fn new(
        config: GatewayConfig,
        vocab: Vocabulary,
        hub: Arc<SnapshotHub>,
        store: Arc<SessionStore>,
        judge_tx: Sender<JudgeJob>,
        recorder: Arc<Recorder>,
    ) -> Self {
        ChatService {
            config,
            vocab,
            hub,
            store,
            judge_tx,
            recorder,
            generation_gate: Gate::new(),
            served: AtomicU64::new(0),
        }
    }

    pub fn generation_gate(&self) -> &Gate {
        &self.generation_gate
    }

    pub fn hub(&self) -> &Arc<SnapshotHub> {
        &self.hub
    }

    pub fn store(&self) -> &Arc<SessionStore> {
        &self.store
    }

    pub fn recorder(&self) -> &Arc<Recorder> {
        &self.recorder
    }

    pub fn requests_served(&self) -> u64 {
        self.served.load(Ordering::Relaxed)
    }

    /// Serves one chat request: resolve session, classify, link the pending
    /// turn's next-state signal (enqueuing its judge job), generate from the
    /// current snapshot, store the turn, record, respond. Holds only this
    /// session's lock; never waits on the judge or trainer.
    pub fn handle_chat(&self, api_key: &str, req: ChatRequest) -> Result<ChatResponse, GatewayError> {
        if api_key.is_empty() {
            return Err(GatewayError::Unauthorized);
        }
        if let Some(required) = &self.config.required_key {
            if api_key != required {
                return Err(GatewayError::Unauthorized);
            }
        }
        if req.messages.is_empty() {
            return Err(GatewayError::BadRequest("messages must be non-empty".into()));
        }

        let session_id = req
            .session_id
            .clone()
            .unwrap_or_else(|| derive_session_id(api_key, &req.messages));
        let session_arc =
            self.store
                .resolve_or_create(&session_id, &hash_api_key(api_key), now_ms());
        let mut session = session_arc.lock();
        session.last_active_ms = now_ms();

        let kind = classify_turn(req.turn_kind_hint.as_deref(), &req.messages);

        // A main-line request closes the loop on the previous main-line turn:
        // whatever the client appended since our last response is that turn's
        // next-state signal, and the turn becomes judgeable.
        if kind == TurnKind::MainLine {
            if let Ok((linked_index, text)) = link_next_state(&mut session, &req.messages) {
                if !text.is_empty() {
                    let job = JudgeJob {
                        session_id: session_id.clone(),
                        turn: session.turns[linked_index].clone(),
                        seed: derive_seed(
                            self.config.run_seed,
                            &["judge", &session_id, &linked_index.to_string()],
                        ),
                        attempts: 0,
                    };
                    // Fire and forget; a closed channel means shutdown.
                    let _ = self.judge_tx.send(job);
                }
            }
        }

        let params = self.hub.current();
        self.generation_gate.pass();

        let options = req.generation.clone().unwrap_or_default();
        let max_len = options.max_len.unwrap_or(self.config.default_max_len);
        let temperature = options
            .temperature
            .unwrap_or(self.config.default_temperature);
        let next_index = match kind {
            TurnKind::MainLine => session.turns.len(),
            TurnKind::Side => session.side_turns.len(),
        };
        let seed = options.seed.unwrap_or_else(|| {
            derive_seed(
                self.config.run_seed,
                &["gen", &session_id, kind_str(kind), &next_index.to_string()],
            )
        });

        let context = context_from_messages(&self.vocab, &req.messages);
        let generation = params
            .sample(&context, temperature, max_len, seed)
            .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
        let visible = match generation.tokens.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => &generation.tokens[..],
        };
        let response_text = self
            .vocab
            .decode(visible)
            .expect("sampled tokens are in-vocabulary");

        let turn_index = session.push_turn(TurnRecord {
            index: 0, // assigned by push_turn
            kind,
            request: req.messages.clone(),
            response_tokens: generation.tokens.clone(),
            response_text: response_text.clone(),
            old_log_probs: generation.log_probs.clone(),
            next_state: None,
            policy_version: params.version,
        });
        drop(session);

        self.recorder.record(RecordEvent::new(
            RecordKind::Turn,
            Some(session_id.clone()),
            Some(turn_index),
            json!({
                "turn_kind": kind_str(kind),
                "policy_version": params.version,
                "messages": req.messages,
                "response_text": response_text,
                "terminated_by": terminated_str(generation.terminated_by),
            }),
        ));

        let served = self.served.fetch_add(1, Ordering::Relaxed) + 1;
        if served % 256 == 0 {
            self.store
                .evict_idle(self.config.session_ttl_ms, now_ms());
        }

        Ok(ChatResponse {
            response_text,
            session_id,
            turn_index,
            turn_kind: kind_str(kind).to_string(),
            policy_version: params.version,
            terminated_by: terminated_str(generation.terminated_by).to_string(),
            tokens: generation.tokens,
        })
    }

    pub fn metrics(&self) -> serde_json::Value {
        json!({
            "policy_version": self.hub.version(),
            "sessions": self.store.len(),
            "requests_served": self.requests_served(),
            "judge_queue_depth": self.judge_tx.len(),
            "recorder": self.recorder.metrics(),
        })
    }
}

/// Atomically moves serving to the next snapshot. In-flight generations keep
/// the Arc they already read and finish on the old parameters; the recorder
/// rotates first, so the swap event and everything after it land in the new
/// version's file.
pub fn graceful_weight_swap(
    hub: &SnapshotHub,
    recorder: &Recorder,
    next: PolicyParams,
) -> Result<u64, PolicyError> {
    let expected = hub.version() + 1;
    if next.version != expected {
        return Err(PolicyError::VersionSkew {
            expected,
            got: next.version,
        });
    }
    recorder.rotate_on_version(next.version).map_err(|e| match e {
        RecorderError::VersionSkew { expected, got } => PolicyError::VersionSkew { expected, got },
        RecorderError::Io(e) => PolicyError::Io(e),
    })?;
    let version = next.version;
    hub.publish(next)?;
    recorder.record(RecordEvent::new(
        RecordKind::WeightSwap,
        None,
        None,
        json!({ "new_version": version }),
    ));
    Ok(version)
}

// ───────────────────────── HTTP layer ─────────────────────────

/// A running HTTP server bound to a local port, thread per connection with
/// keep-alive. Stops on drop.
pub struct Gateway {
    service: Arc<ChatService>,
    addr: SocketAddr,
    shutdown: ShutdownFlag,
    accept_handle: Option<JoinHandle<()>>,
}

impl Gateway {
    pub fn start(service: Arc<ChatService>) -> io::Result<Gateway> {
        let listener = TcpListener::bind(&service.config.addr)?;
        let addr = listener.local_addr()?;
        let shutdown = ShutdownFlag::new();
        let accept_handle = {
            let service = service.clone();
            let shutdown = shutdown.clone();
            std::thread::Builder::new()
                .name("gateway-accept".into())
                .spawn(move || accept_loop(listener, service, shutdown))?
        };
        Ok(Gateway {
            service,
            addr,
            shutdown,
            accept_handle: Some(accept_handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn service(&self) -> &Arc<ChatService> {
        &self.service
    }

    pub fn stop(&mut self) {
        if self.accept_handle.is_none() {
            return;
        }
        self.shutdown.trigger();
        // Poke the listener so accept() returns and sees the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, service: Arc<ChatService>, shutdown: ShutdownFlag) {
    for stream in listener.incoming() {
        if shutdown.is_triggered() {
            break;
        }
        let Ok(stream) = stream else { continue };
        let service = service.clone();
        let shutdown = shutdown.clone();
        let _ = std::thread::Builder::new()
            .name("gateway-conn".into())
            .spawn(move || handle_connection(service, stream, shutdown));
    }
}

struct HttpRequest {
    method: String,
    path: String,
    /// Header names lowercased.
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl HttpRequest {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }
}

fn handle_connection(service: Arc<ChatService>, mut stream: TcpStream, shutdown: ShutdownFlag) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let _ = stream.set_nodelay(true);
    let mut buf = Vec::new();
    loop {
        if shutdown.is_triggered() {
            return;
        }
        let request = match read_request(&mut stream, &mut buf) {
            Ok(Some(r)) => r,
            Ok(None) => return,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock
                    || e.kind() == io::ErrorKind::TimedOut =>
            {
                return
            }
            Err(_) => {
                let (status, body) = error_body(400, "bad_request", "malformed HTTP request");
                let _ = write_response(&mut stream, status, &body, false);
                return;
            }
        };
        let close = request
            .header("connection")
            .is_some_and(|v| v.eq_ignore_ascii_case("close"));
        let (status, body) = dispatch(&service, &request);
        if write_response(&mut stream, status, &body, !close).is_err() {
            return;
        }
        if close {
            return;
        }
    }
}

/// Reads one HTTP request off the stream. `buf` carries bytes across calls
/// on a keep-alive connection. Returns Ok(None) on clean EOF.
fn read_request(stream: &mut TcpStream, buf: &mut Vec<u8>) -> io::Result<Option<HttpRequest>> {
    let mut scratch = [0u8; 8192];
    loop {
        let parsed = {
            let mut headers = [httparse::EMPTY_HEADER; 32];
            let mut req = httparse::Request::new(&mut headers);
            match req.parse(buf) {
                Ok(httparse::Status::Complete(header_len)) => {
                    let method = req.method.unwrap_or("").to_string();
                    let path = req.path.unwrap_or("").to_string();
                    let headers: Vec<(String, String)> = req
                        .headers
                        .iter()
                        .map(|h| {
                            (
                                h.name.to_ascii_lowercase(),
                                String::from_utf8_lossy(h.value).into_owned(),
                            )
                        })
                        .collect();
                    Some((method, path, headers, header_len))
                }
                Ok(httparse::Status::Partial) => None,
                Err(e) => {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
                }
            }
        };
        match parsed {
            Some((method, path, headers, header_len)) => {
                let content_length = headers
                    .iter()
                    .find(|(n, _)| n == "content-length")
                    .and_then(|(_, v)| v.trim().parse::<usize>().ok())
                    .unwrap_or(0);
                while buf.len() < header_len + content_length {
                    let n = stream.read(&mut scratch)?;
                    if n == 0 {
                        return Ok(None);
                    }
                    buf.extend_from_slice(&scratch[..n]);
                }
                let body = buf[header_len..header_len + content_length].to_vec();
                buf.drain(..header_len + content_length);
                return Ok(Some(HttpRequest {
                    method,
                    path,
                    headers,
                    body,
                }));
            }
            None => {
                let n = stream.read(&mut scratch)?;
                if n == 0 {
                    return Ok(None);
                }
                buf.extend_from_slice(&scratch[..n]);
            }
        }
    }
}

fn dispatch(service: &ChatService, request: &HttpRequest) -> (u16, serde_json::Value) {
    match (request.method.as_str(), request.path.as_str()) {
        ("GET", "/healthz") => (200, json!({ "status": "ok" })),
        ("GET", "/version") => (200, json!({ "policy_version": service.hub.version() })),
        ("GET", "/metrics") => (200, service.metrics()),
        ("POST", "/v1/chat") => handle_chat_http(service, request),
        ("GET", "/v1/chat") => error_body(405, "method_not_allowed", "use POST"),
        _ => error_body(404, "not_found", "unknown route"),
    }
}

fn handle_chat_http(service: &ChatService, request: &HttpRequest) -> (u16, serde_json::Value) {
    let api_key = request
        .header("authorization")
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .unwrap_or("");
    let mut body: ChatRequest = match serde_json::from_slice(&request.body) {
        Ok(b) => b,
        Err(e) => return error_body(400, "bad_request", &format!("invalid JSON body: {e}")),
    };
    if let Some(sid) = request.header("x-session-id") {
        body.session_id = Some(sid.to_string());
    }
    if let Some(kind) = request.header("x-turn-kind") {
        body.turn_kind_hint = Some(kind.to_string());
    }
    match service.handle_chat(api_key, body) {
        Ok(response) => (200, serde_json::to_value(response).expect("response serializes")),
        Err(GatewayError::Unauthorized) => error_body(401, "unauthorized", "missing or bad api key"),
        Err(GatewayError::BadRequest(msg)) => error_body(400, "bad_request", &msg),
    }
}

fn error_body(status: u16, code: &str, message: &str) -> (u16, serde_json::Value) {
    (status, json!({ "error": { "code": code, "message": message } }))
}

fn write_response(
    stream: &mut TcpStream,
    status: u16,
    body: &serde_json::Value,
    keep_alive: bool,
) -> io::Result<()> {
    let body = serde_json::to_vec(body)?;
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "Error",
    };
    let connection = if keep_alive { "keep-alive" } else { "close" };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: {connection}\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(&body)
}

//! Session and turn bookkeeping: which turns belong to which conversation,
//! which turn is awaiting its next-state signal, and how incoming requests
//! are classified as trainable main-line turns or untrainable side turns.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};

use crate::types::{CoreError, Message, Role, TurnKind, TurnRecord};

/// One conversational trajectory.
///
/// Main-line and side turns are kept in separate lists so each kind has
/// consecutive indices from 0 and the pending-next-state rule ("only the most
/// recent main-line turn may be unlinked") stays simple to audit.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub api_key_hash: String,
    /// Main-line (trainable) turns; index == position.
    pub turns: Vec<TurnRecord>,
    /// Side turns, stored for replay and debugging only.
    pub side_turns: Vec<TurnRecord>,
    pub created_at_ms: u64,
    pub last_active_ms: u64,
}

impl Session {
    pub fn new(id: impl Into<String>, api_key_hash: impl Into<String>, now_ms: u64) -> Self {
        Session {
            id: id.into(),
            api_key_hash: api_key_hash.into(),
            turns: Vec::new(),
            side_turns: Vec::new(),
            created_at_ms: now_ms,
            last_active_ms: now_ms,
        }
    }

    /// Appends a served turn and returns its index within its kind.
    pub fn push_turn(&mut self, mut turn: TurnRecord) -> usize {
        let list = match turn.kind {
            TurnKind::MainLine => &mut self.turns,
            TurnKind::Side => &mut self.side_turns,
        };
        turn.index = list.len();
        let index = turn.index;
        list.push(turn);
        index
    }

    /// The most recent main-line turn still awaiting its next-state signal,
    /// if any. By construction only the last main-line turn can be pending.
    pub fn pending_turn_index(&self) -> Option<usize> {
        match self.turns.last() {
            Some(turn) if turn.next_state.is_none() => Some(turn.index),
            _ => None,
        }
    }
}

/// Sets the pending main-line turn's next-state signal from an incoming
/// request and returns `(turn_index, extracted_text)`.
///
/// The incoming message list normally repeats the conversation history, so
/// the reaction to the previous response is the suffix after the last
/// assistant message: every user or tool message there, contents joined with
/// newlines. When the request carries no assistant message (a bare reaction),
/// the whole list is the suffix.
///
/// Fails with [`CoreError::NoPendingTurn`] when the session has no main-line
/// turn awaiting a signal — the first request of a session, or a repeated
/// call for a turn that was already linked.
pub fn link_next_state(
    session: &mut Session,
    incoming: &[Message],
) -> Result<(usize, String), CoreError> {
    let pending = session.pending_turn_index().ok_or(CoreError::NoPendingTurn)?;

    let suffix_start = incoming
        .iter()
        .rposition(|m| m.role == Role::Assistant)
        .map(|p| p + 1)
        .unwrap_or(0);
    let text = incoming[suffix_start..]
        .iter()
        .filter(|m| matches!(m.role, Role::User | Role::Tool))
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");

    session.turns[pending].next_state = Some(text.clone());
    Ok((pending, text))
}

/// Classifies a request as a main-line or side turn.
///
/// An explicit hint ("main" / "side", from the turn-kind header) wins.
/// Otherwise the heuristic: main-line iff the last message is from the user
/// or a tool — auxiliary and memory-style queries arrive as assistant-
/// initiated or system-only payloads. Unrecognized hint values fall back to
/// the heuristic rather than erroring.
pub fn classify_turn(turn_kind_hint: Option<&str>, messages: &[Message]) -> TurnKind {
    match turn_kind_hint {
        Some("main") => return TurnKind::MainLine,
        Some("side") => return TurnKind::Side,
        _ => {}
    }
    match messages.last() {
        Some(m) if matches!(m.role, Role::User | Role::Tool) => TurnKind::MainLine,
        _ => TurnKind::Side,
    }
}

/// Derives a stable session id for requests that do not carry one: a digest
/// of the api key and the first system message of the conversation.
pub fn derive_session_id(api_key: &str, messages: &[Message]) -> String {
    let system = messages
        .iter()
        .find(|m| m.role == Role::System)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let mut hasher = Sha256::new();
    hasher.update((api_key.len() as u64).to_le_bytes());
    hasher.update(api_key.as_bytes());
    hasher.update(system.as_bytes());
    let digest = hasher.finalize();
    let mut id = String::with_capacity(21);
    id.push_str("anon-");
    for byte in &digest[..8] {
        id.push_str(&format!("{byte:02x}"));
    }
    id
}

/// Hex digest of an api key, stored on sessions instead of the key itself.
pub fn hash_api_key(api_key: &str) -> String {
    let digest = Sha256::digest(api_key.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Shared session map: any loop may read, only the gateway mutates.
///
/// The outer map is behind a read-write lock; each session has its own mutex
/// so concurrent requests on different sessions never contend.
#[derive(Default)]
pub struct SessionStore {
    inner: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fetches the session with this id, creating it on first sight.
    pub fn resolve_or_create(
        &self,
        id: &str,
        api_key_hash: &str,
        now_ms: u64,
    ) -> Arc<Mutex<Session>> {
        if let Some(existing) = self.inner.read().get(id) {
            return existing.clone();
        }
        let mut map = self.inner.write();
        map.entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(Session::new(id, api_key_hash, now_ms))))
            .clone()
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.inner.read().get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.read().is_empty()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.inner.read().keys().cloned().collect()
    }

    /// Drops sessions idle longer than `ttl_ms`; returns how many were evicted.
    pub fn evict_idle(&self, ttl_ms: u64, now_ms: u64) -> usize {
        let mut map = self.inner.write();
        let before = map.len();
        map.retain(|_, session| {
            let last = session.lock().last_active_ms;
            now_ms.saturating_sub(last) < ttl_ms
        });
        before - map.len()
    }
}
